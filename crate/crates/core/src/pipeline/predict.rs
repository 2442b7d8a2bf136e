use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::corpus::Entity;
use crate::detectors::{end_filter, sample_candidates};
use crate::encoder::TokenIds;
use crate::error::Result;
use crate::hypergraph::{build_hypergraph, extract_entities, Tag};
use crate::nn::Graph;

/// Sentences encoded per graph during prediction.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub lambda: f64,
    pub threshold: Option<f64>,
}

impl PredictOptions {
    pub fn from_model(model: &Model) -> Self {
        PredictOptions {
            lambda: model.training.lambda_eval,
            threshold: model.training.end_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub entities: BTreeSet<Entity>,
    /// Entities before the end filter.
    pub unfiltered: BTreeSet<Entity>,
    pub candidates: BTreeSet<usize>,
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
}

/// Runs the decoding stages given per-token start and end probabilities
/// and a tagger for each sampled start token.
pub fn predict_from_stages(
    start_probs: Vec<f64>,
    end_probs: Vec<f64>,
    options: PredictOptions,
    mut decode: impl FnMut(usize) -> Result<Vec<Tag>>,
) -> Result<Prediction> {
    let candidates = sample_candidates(&start_probs, options.lambda, None);
    let mut unfiltered = BTreeSet::new();
    for &start in &candidates {
        let tags = decode(start)?;
        unfiltered.extend(extract_entities(&build_hypergraph(start, &tags)?));
    }
    let entities = end_filter(&unfiltered, &end_probs, options.threshold);
    Ok(Prediction {
        entities,
        unfiltered,
        candidates,
        start_probs,
        end_probs,
    })
}

pub fn predict(model: &Model, ids: &TokenIds, options: PredictOptions) -> Result<Prediction> {
    Ok(predict_batch(model, &[ids], options)?.remove(0))
}

/// Predictions for many sentences; identical to predicting each alone.
pub fn predict_batch(
    model: &Model,
    batch: &[&TokenIds],
    options: PredictOptions,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(CHUNK) {
        let mut g = Graph::new(&model.store);
        let views = model.views(&mut g, chunk)?;
        for v in &views {
            let ps = model.start_estimator.forward(&mut g, v.start)?;
            let pe = model.end_estimator.forward(&mut g, v.end)?;
            let proj = g.value(v.proj).clone();
            let n = proj.rows();
            let mut queries = Vec::with_capacity(n);
            let start_probs = g.value(ps).data().to_vec();
            let end_probs = g.value(pe).data().to_vec();
            for i in 0..n {
                let q = model.query_row(&mut g, v, i)?;
                queries.push(g.value(q).data().to_vec());
            }
            let pred = predict_from_stages(start_probs, end_probs, options, |start| {
                Ok(model
                    .generator
                    .decode_greedy(&model.store, start, &proj, &queries[start])?
                    .tags)
            })?;
            out.push(pred);
        }
    }
    Ok(out)
}

/// The generator's greedy tag sequence from one start token, whatever the
/// start estimator says about it.
pub fn decode_tags(model: &Model, ids: &TokenIds, start: usize) -> Result<Vec<Tag>> {
    let mut g = Graph::new(&model.store);
    let views = model.views(&mut g, &[ids])?;
    let v = &views[0];
    if start >= g.value(v.proj).rows() {
        return Err(crate::error::Error::Invalid(format!(
            "start {start} outside the sentence"
        )));
    }
    let proj = g.value(v.proj).clone();
    let q = model.query_row(&mut g, v, start)?;
    let query = g.value(q).data().to_vec();
    Ok(model
        .generator
        .decode_greedy(&model.store, start, &proj, &query)?
        .tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabs;
    use crate::pipeline::tests::tiny_corpus;
    use crate::pipeline::{ModelConfig, TrainConfig};

    #[test]
    fn nothing_sampled_means_nothing_predicted() {
        let opts = PredictOptions {
            lambda: 1.5,
            threshold: None,
        };
        let p = predict_from_stages(vec![0.1, 0.2], vec![0.9, 0.9], opts, |_| {
            Ok(vec![Tag::E(0)])
        })
        .unwrap();
        assert!(p.entities.is_empty() && p.candidates.is_empty());
    }

    #[test]
    fn o_tagger_predicts_nothing() {
        let opts = PredictOptions {
            lambda: 3.0,
            threshold: None,
        };
        let p = predict_from_stages(vec![0.9, 0.8, 0.7], vec![0.9; 3], opts, |_| {
            Ok(vec![Tag::O])
        })
        .unwrap();
        assert_eq!(p.candidates.len(), 3);
        assert!(p.entities.is_empty());
    }

    #[test]
    fn scripted_traces_give_hypergraph_entities() {
        let opts = PredictOptions {
            lambda: 1.0,
            threshold: Some(0.5),
        };
        let p = predict_from_stages(
            vec![0.9, 0.1, 0.8, 0.2],
            vec![0.1, 0.9, 0.9, 0.3],
            opts,
            |s| {
                Ok(match s {
                    0 => vec![Tag::I, Tag::E(1), Tag::O],
                    _ => vec![Tag::E(0), Tag::E(1)],
                })
            },
        )
        .unwrap();
        let e = |s, t, c| Entity::new(s, t, c);
        assert_eq!(
            p.unfiltered,
            [e(0, 1, 1), e(2, 2, 0), e(2, 3, 1)].into_iter().collect()
        );
        assert_eq!(p.entities, [e(0, 1, 1), e(2, 2, 0)].into_iter().collect());
    }

    #[test]
    fn batch_prediction_matches_single() {
        let sents = tiny_corpus();
        let model = Model::new(
            ModelConfig::default(),
            TrainConfig::default(),
            build_vocabs(&sents, 1),
            3,
        )
        .unwrap();
        let ex = model.prepare(&sents, None).unwrap();
        let opts = PredictOptions {
            lambda: 3.0,
            threshold: None,
        };
        let ids: Vec<&TokenIds> = ex.iter().map(|e| &e.ids).collect();
        let all = predict_batch(&model, &ids, opts).unwrap();
        for (i, e) in ex.iter().enumerate() {
            assert_eq!(predict(&model, &e.ids, opts).unwrap(), all[i]);
        }
    }
}
