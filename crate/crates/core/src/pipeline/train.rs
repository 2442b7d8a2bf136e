use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Scores};
use super::predict::{predict_batch, PredictOptions};
use super::{Example, Model, ModelConfig, TrainConfig};
use crate::corpus::{build_vocabs, Entity, Sentence};
use crate::detectors::{estimator_labels, sample_candidates, Boundary};
use crate::error::{Error, Result};
use crate::generator::Candidate;
use crate::hypergraph::{gold_tag_sequence, Tag};
use crate::nn::{AdamW, AdamWConfig, Graph, LrSchedule, Tensor, Var};

/// Batches are drawn from length-sorted pools of this many batches.
const POOL_BATCHES: usize = 32;

/// Sentences with optional precomputed context vectors.
#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub sentences: &'a [Sentence],
    pub vectors: Option<&'a [Tensor]>,
}

impl<'a> From<&'a [Sentence]> for Corpus<'a> {
    fn from(sentences: &'a [Sentence]) -> Self {
        Corpus {
            sentences,
            vectors: None,
        }
    }
}

impl<'a> From<&'a Vec<Sentence>> for Corpus<'a> {
    fn from(sentences: &'a Vec<Sentence>) -> Self {
        Corpus {
            sentences,
            vectors: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub start: f64,
    pub end: f64,
    pub hypergraph: f64,
    pub candidates: usize,
}

/// `w_s·L_s + w_e·L_e + w_hg·L_hg` over a batch.
///
/// The estimator losses are summed over tokens and averaged over sentences;
/// the generator loss is averaged over all sampled-or-gold start candidates
/// of the batch.
pub fn joint_loss(
    model: &Model,
    g: &mut Graph,
    batch: &[&Example],
    config: &TrainConfig,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let ids: Vec<_> = batch.iter().map(|e| &e.ids).collect();
    let views = model.views(g, &ids)?;
    let mut start_terms = Vec::with_capacity(batch.len());
    let mut end_terms = Vec::with_capacity(batch.len());
    let mut plans: Vec<(usize, usize, Vec<Tag>)> = Vec::new();
    for (k, (ex, v)) in batch.iter().zip(&views).enumerate() {
        let n = ex.len();
        let ps = model.start_estimator.forward(g, v.start)?;
        let ys = estimator_labels(&ex.gold, n, Boundary::Start);
        start_terms.push(g.focal_loss(ps, &ys, config.gamma)?);
        let pe = model.end_estimator.forward(g, v.end)?;
        let ye = estimator_labels(&ex.gold, n, Boundary::End);
        end_terms.push(g.focal_loss(pe, &ye, config.gamma)?);

        let gold_starts: BTreeSet<usize> = ex.gold.iter().map(|e| e.start).collect();
        let candidates =
            sample_candidates(g.value(ps).data(), config.lambda_train, Some(&gold_starts));
        for start in candidates {
            let tags = gold_tag_sequence(ex.gold_starting_at(start), start, n)?.tags;
            plans.push((k, start, tags));
        }
    }
    let mean = |g: &mut Graph, terms: &[Var]| {
        let w = 1.0 / terms.len() as f64;
        let weighted: Vec<(Var, f64)> = terms.iter().map(|&t| (t, w)).collect();
        g.weighted_sum(&weighted)
    };
    let l_start = mean(g, &start_terms)?;
    let l_end = mean(g, &end_terms)?;

    let mut queries = Vec::with_capacity(plans.len());
    for (k, start, _) in &plans {
        queries.push(model.query_row(g, &views[*k], *start)?);
    }
    let cands: Vec<Candidate> = plans
        .iter()
        .zip(&queries)
        .map(|((k, start, tags), &query)| Candidate {
            content_proj: views[*k].proj,
            start: *start,
            query,
            gold: tags,
        })
        .collect();
    let l_hg = model.generator.batch_loss(g, &cands)?;

    let w = config.loss_weights;
    let mut terms = vec![(l_start, w.start), (l_end, w.end)];
    if let Some(h) = l_hg {
        terms.push((h, w.hypergraph));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(JointLoss {
        total,
        start: g.value(l_start).item(),
        end: g.value(l_end).item(),
        hypergraph: l_hg.map_or(0.0, |h| g.value(h).item()),
        candidates: cands.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches.
    pub train_loss: f64,
    pub dev: Option<Scores>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev F1 (the last epoch
    /// without a dev set).
    pub model: Model,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Groups sentences of similar length: a seeded shuffle, then length sorting
/// inside pools of [`POOL_BATCHES`] batches, then a shuffle of the batches.
fn make_batches(lens: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * POOL_BATCHES) {
        pool.sort_by_key(|&i| lens[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub fn train(
    train: Corpus<'_>,
    dev: Corpus<'_>,
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train, dev, model_config, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    train: Corpus<'_>,
    dev: Corpus<'_>,
    model_config: ModelConfig,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.sentences.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let vocabs = build_vocabs(train.sentences, model_config.min_word_freq);
    let mut model = Model::new(model_config, config, vocabs, config.seed)?;
    let train_ex = model.prepare(train.sentences, train.vectors)?;
    let dev_ex = model.prepare(dev.sentences, dev.vectors)?;
    let dev_ids: Vec<_> = dev_ex.iter().map(|e| &e.ids).collect();
    let dev_gold: Vec<BTreeSet<Entity>> = dev_ex.iter().map(|e| e.gold.clone()).collect();

    let lens: Vec<usize> = train_ex.iter().map(Example::len).collect();
    let per_epoch = train_ex.len().div_ceil(config.batch_size) as u64;
    let total = per_epoch * config.epochs as u64;
    let warmup = ((config.warmup_fraction * total as f64).round() as u64).min(total - 1);
    let schedule = LrSchedule::new(config.learning_rates.as_array(), warmup, total)?;
    let mut optim = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut grads = model.store.zero_grads();
    let options = PredictOptions {
        lambda: config.lambda_eval,
        threshold: config.end_threshold,
    };

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, crate::nn::ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let batches = make_batches(&lens, config.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_ex[i]).collect();
            grads.zero();
            {
                let mut g = Graph::new(&model.store);
                let loss = joint_loss(&model, &mut g, &batch, &config)?;
                loss_sum += g.value(loss.total).item();
                g.backward(loss.total, &mut grads);
            }
            if let Some(cap) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > cap {
                    grads.scale(cap / norm);
                }
            }
            let rates = schedule.rates_at(optim.steps());
            optim.step(&mut model.store, &grads, |group| rates[group.index()])?;
        }
        let dev_scores = if dev_ex.is_empty() {
            None
        } else {
            let preds = predict_batch(&model, &dev_ids, options)?;
            let sets: Vec<BTreeSet<Entity>> = preds.into_iter().map(|p| p.entities).collect();
            Some(evaluate(&sets, &dev_gold, model.class_names())?.overall)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            dev: dev_scores,
        };
        on_epoch(&metrics);
        let score = dev_scores.map_or(epoch as f64, |s| s.f1);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.store.clone()));
        }
        log.push(metrics);
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}
