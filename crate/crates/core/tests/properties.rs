use std::collections::BTreeSet;
use std::path::Path;

use nestgraph::corpus::{
    build_vocabs, corpus_stats, generate_synthetic, is_nested, read_jsonl, sentence_to_json,
    Entity, RawEntity, Sentence, SynthParams,
};
use nestgraph::detectors::{end_filter, sample_candidates};
use nestgraph::hypergraph::{
    build_hypergraph, extract_entities, extract_entities_by_paths, gold_tag_sequence, validate, Tag,
};
use nestgraph::pipeline::evaluate;
use proptest::prelude::*;

fn tag(n_classes: usize) -> impl Strategy<Value = Tag> {
    prop_oneof![Just(Tag::I), (0..n_classes).prop_map(Tag::E)]
}

/// Tag sequences the generator can emit: no O except possibly last.
fn tag_sequence() -> impl Strategy<Value = Vec<Tag>> {
    (prop::collection::vec(tag(4), 1..15), any::<bool>()).prop_map(|(mut tags, close)| {
        if close {
            *tags.last_mut().unwrap() = Tag::O;
        }
        tags
    })
}

/// A sentence length, a start token and entities from it with distinct ends.
fn local_entities() -> impl Strategy<Value = (usize, usize, BTreeSet<Entity>)> {
    (1usize..30)
        .prop_flat_map(|n| (Just(n), 0..n))
        .prop_flat_map(|(n, start)| {
            let ends = prop::collection::btree_map(start..n, 0usize..5, 0..=(n - start).min(5));
            (Just(n), Just(start), ends)
        })
        .prop_map(|(n, start, ends)| {
            let set = ends
                .into_iter()
                .map(|(e, c)| Entity::new(start, e, c))
                .collect();
            (n, start, set)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn gold_tags_round_trip((n, start, set) in local_entities()) {
        let gold = gold_tag_sequence(&set, start, n).unwrap();
        prop_assert!(gold.conflicts.is_empty());
        prop_assert!(start + gold.tags.len() <= n);
        let hg = build_hypergraph(start, &gold.tags).unwrap();
        prop_assert_eq!(extract_entities(&hg), set);
    }

    #[test]
    fn built_graphs_are_valid(start in 0usize..50, tags in tag_sequence()) {
        let hg = build_hypergraph(start, &tags).unwrap();
        prop_assert!(validate(&hg).is_empty(), "{:?}", validate(&hg));
        prop_assert_eq!(hg.steps(), tags.len());
    }

    #[test]
    fn path_and_node_extraction_agree(start in 0usize..50, tags in tag_sequence()) {
        let hg = build_hypergraph(start, &tags).unwrap();
        let by_nodes = extract_entities(&hg);
        prop_assert_eq!(&by_nodes, &extract_entities_by_paths(&hg));
        let e_count = tags.iter().filter(|t| matches!(t, Tag::E(_))).count();
        prop_assert_eq!(by_nodes.len(), e_count);
    }

    #[test]
    fn candidates_are_the_best_scoring_tokens(
        probs in prop::collection::vec(0.0f64..1.0, 1..30),
        lambda in 0.5f64..4.0,
    ) {
        let picked = sample_candidates(&probs, lambda, None);
        let above = probs.iter().filter(|&&p| p > 0.5).count();
        let k = ((lambda * above as f64).ceil() as usize).min(probs.len());
        prop_assert_eq!(picked.len(), k);
        let worst_in = picked.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        for i in (0..probs.len()).filter(|i| !picked.contains(i)) {
            prop_assert!(probs[i] <= worst_in);
        }
    }

    #[test]
    fn gold_starts_are_always_sampled(
        probs in prop::collection::vec(0.0f64..1.0, 1..30),
        gold in prop::collection::btree_set(0usize..30, 0..5),
    ) {
        let gold: BTreeSet<usize> = gold.into_iter().filter(|&g| g < probs.len()).collect();
        let with = sample_candidates(&probs, 1.5, Some(&gold));
        let without = sample_candidates(&probs, 1.5, None);
        prop_assert!(gold.is_subset(&with));
        prop_assert!(without.is_subset(&with));
    }

    #[test]
    fn end_filter_is_a_monotone_subset(
        ends in prop::collection::vec(0.0f64..1.0, 1..20),
        spans in prop::collection::vec((0usize..20, 0usize..20, 0usize..3), 0..20),
        lo in 0.0f64..1.0,
        hi in 0.0f64..1.0,
    ) {
        let n = ends.len();
        let set: BTreeSet<Entity> = spans
            .into_iter()
            .map(|(a, b, c)| (a % n, b % n, c))
            .map(|(a, b, c)| Entity::new(a.min(b), a.max(b), c))
            .collect();
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let none = end_filter(&set, &ends, None);
        let loose = end_filter(&set, &ends, Some(lo));
        let strict = end_filter(&set, &ends, Some(hi));
        prop_assert_eq!(&none, &set);
        prop_assert!(strict.is_subset(&loose) && loose.is_subset(&set));
        prop_assert!(loose.iter().all(|e| ends[e.end] >= lo));
    }

    #[test]
    fn scores_are_bounded(
        pred in prop::collection::vec(prop::collection::btree_set((0usize..6, 0usize..6, 0usize..2), 0..5), 1..5),
        gold in prop::collection::vec(prop::collection::btree_set((0usize..6, 0usize..6, 0usize..2), 0..5), 1..5),
    ) {
        let len = pred.len().min(gold.len());
        let to_sets = |v: &[BTreeSet<(usize, usize, usize)>]| -> Vec<BTreeSet<Entity>> {
            v[..len].iter().map(|s| s.iter().map(|&(a, b, c)| Entity::new(a, b, c)).collect()).collect()
        };
        let (p, g) = (to_sets(&pred), to_sets(&gold));
        let names = vec!["A".to_string(), "B".to_string()];
        let r = evaluate(&p, &g, &names).unwrap().overall;
        for v in [r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
        prop_assert_eq!(evaluate(&g, &g, &names).unwrap().overall.f1, 1.0);
    }

    #[test]
    fn jsonl_round_trip(
        tokens in prop::collection::vec("[a-z\u{e9}\"\\\\ ]{1,6}", 1..10),
        spans in prop::collection::vec((0usize..10, 0usize..10, "[A-Z]{1,4}"), 0..6),
    ) {
        let n = tokens.len();
        let entities = spans
            .into_iter()
            .map(|(a, b, label)| RawEntity { start: (a % n).min(b % n), end: (a % n).max(b % n), label })
            .collect();
        let s = Sentence::new(tokens, None, entities).unwrap();
        let line = sentence_to_json(&s);
        let back = read_jsonl(line.as_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, vec![s]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synthetic_corpora_are_well_formed(
        seed in any::<u64>(),
        classes in 1usize..6,
        depth in 1usize..4,
        rate in 0.0f64..=1.0,
        extra in 0usize..12,
    ) {
        let params = SynthParams {
            n_classes: classes,
            max_depth: depth,
            nesting_rate: if depth < 2 { 0.0 } else { rate },
            max_len: 2 * depth + 1 + extra,
        };
        let corpus = generate_synthetic(seed, 30, &params).unwrap();
        prop_assert_eq!(&corpus, &generate_synthetic(seed, 30, &params).unwrap());
        let vocab = build_vocabs(&corpus, 1).class;
        prop_assert!(vocab.len() <= classes);
        for s in &corpus {
            prop_assert!(s.len() <= params.max_len && !s.is_empty());
            let typed = s.typed_entities(&vocab).unwrap();
            let starts: BTreeSet<usize> = typed.iter().map(|e| e.start).collect();
            for st in starts {
                let g = gold_tag_sequence(typed.iter().filter(|e| e.start == st), st, s.len()).unwrap();
                prop_assert!(g.conflicts.is_empty());
            }
            if params.nesting_rate == 0.0 {
                prop_assert!(s.entities.iter().all(|e| !is_nested(e, &s.entities)));
            }
        }
        let stats = corpus_stats(&corpus);
        prop_assert!(stats.nested_entities <= stats.total_entities);
    }
}
