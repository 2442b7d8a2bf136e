//! The assembled model: training, prediction, scoring and checkpoints.

mod checkpoint;
mod eval;
mod predict;
mod train;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, Sentence, Vocab, Vocabs};
use crate::detectors::{Boundary, Estimator};
use crate::encoder::{EncoderBank, EncoderDims, TokenIds};
use crate::error::{Error, Result};
use crate::generator::{Generator, QueryInit};
use crate::nn::{Graph, LrGroup, ParamStore, Tensor, Var};

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, FORMAT_VERSION, MAGIC,
};
pub use eval::{evaluate, threshold_sweep, EvalReport, Scores, SweepRow, DEFAULT_THRESHOLDS};
pub use predict::{
    decode_tags, predict, predict_batch, predict_from_stages, PredictOptions, Prediction,
};
pub use train::{joint_loss, train, train_with, Corpus, EpochMetrics, JointLoss, TrainOutcome};

/// Architecture choices; fixed once a model is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderDims,
    /// Hidden width of the estimator and generator feed-forward heads.
    pub ffn_hidden: usize,
    pub query_init: QueryInit,
    pub min_word_freq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderDims::default(),
            ffn_hidden: 128,
            query_init: QueryInit::Query,
            min_word_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Context vector table.
    pub contextual: f64,
    /// Word embedding table.
    pub pretrained: f64,
    pub other: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            contextual: 1e-5,
            pretrained: 1e-6,
            other: 2e-4,
        }
    }
}

impl LearningRates {
    pub fn as_array(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for group in LrGroup::ALL {
            out[group.index()] = match group {
                LrGroup::Contextual => self.contextual,
                LrGroup::Pretrained => self.pretrained,
                LrGroup::Other => self.other,
            };
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub start: f64,
    pub end: f64,
    pub hypergraph: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            start: 1.0,
            end: 1.0,
            hypergraph: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rates: LearningRates,
    /// Fraction of all optimizer steps spent warming up.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub lambda_train: f64,
    pub lambda_eval: f64,
    pub gamma: f64,
    /// End confirmation threshold; `None` disables the filter.
    pub end_threshold: Option<f64>,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 8,
            learning_rates: LearningRates::default(),
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            clip_norm: Some(5.0),
            lambda_train: 3.0,
            lambda_eval: 1.5,
            gamma: 0.9,
            end_threshold: Some(0.2),
            seed: 42,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let r = self.learning_rates;
        if [r.contextual, r.pretrained, r.other]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return bad(format!("learning rates must be positive: {r:?}"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            ));
        }
        if !(self.lambda_train > 0.0 && self.lambda_eval > 0.0) {
            return bad("sampling multipliers must be positive".into());
        }
        if !(self.gamma >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("gamma and weight_decay must be nonnegative".into());
        }
        if let Some(t) = self.end_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("end threshold {t} outside [0, 1]"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        let w = self.loss_weights;
        if [w.start, w.end, w.hypergraph].iter().any(|v| !(*v >= 0.0)) {
            return bad(format!("loss weights must be nonnegative: {w:?}"));
        }
        Ok(())
    }
}

/// A sentence ready for the model: vocabulary indices and typed gold spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: TokenIds,
    pub gold: BTreeSet<Entity>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn gold_starting_at(&self, start: usize) -> impl Iterator<Item = &Entity> {
        self.gold
            .range(Entity::new(start, 0, 0)..Entity::new(start + 1, 0, 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub training: TrainConfig,
    pub vocabs: Vocabs,
    pub store: ParamStore,
    pub encoders: EncoderBank,
    pub start_estimator: Estimator,
    pub end_estimator: Estimator,
    pub generator: Generator,
}

/// Graph handles of one sentence's four views.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Views {
    pub start: Var,
    pub end: Var,
    pub query: Option<Var>,
    pub content: Var,
    /// Content rows projected through the generator's input weights.
    pub proj: Var,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        training: TrainConfig,
        vocabs: Vocabs,
        seed: u64,
    ) -> Result<Self> {
        if vocabs.class.is_empty() {
            return Err(Error::Config(
                "no entity classes in the training corpus".into(),
            ));
        }
        if config.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = EncoderBank::new(&mut store, &mut rng, config.encoder, &vocabs)?;
        let d_t = config.encoder.d_t();
        let start_estimator = Estimator::new(
            &mut store,
            &mut rng,
            Boundary::Start,
            d_t,
            config.ffn_hidden,
        )?;
        let end_estimator =
            Estimator::new(&mut store, &mut rng, Boundary::End, d_t, config.ffn_hidden)?;
        let generator = Generator::new(
            &mut store,
            &mut rng,
            d_t,
            config.ffn_hidden,
            vocabs.class.len(),
        )?;
        Ok(Model {
            config,
            training,
            vocabs,
            store,
            encoders,
            start_estimator,
            end_estimator,
            generator,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.vocabs.class.len()
    }

    pub fn class_names(&self) -> &[String] {
        self.vocabs.class.symbols()
    }

    /// Fails unless `classes` is exactly this model's class vocabulary.
    pub fn check_classes(&self, classes: &Vocab) -> Result<()> {
        if classes.symbols() != self.vocabs.class.symbols() {
            return Err(Error::Incompatible(format!(
                "model classes {:?} differ from {:?}",
                self.vocabs.class.symbols(),
                classes.symbols()
            )));
        }
        Ok(())
    }

    /// Indexes `sentences`; gold labels outside the class vocabulary are an
    /// incompatibility error.
    pub fn prepare(
        &self,
        sentences: &[Sentence],
        vectors: Option<&[Tensor]>,
    ) -> Result<Vec<Example>> {
        if let Some(v) = vectors {
            if v.len() != sentences.len() {
                return Err(Error::Vectors(format!(
                    "vectors for {} sentences, corpus has {}",
                    v.len(),
                    sentences.len()
                )));
            }
        }
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut ids = TokenIds::new(s, &self.vocabs);
                if let Some(v) = vectors {
                    ids = ids.with_vectors(v[i].clone())?;
                }
                Ok(Example {
                    ids,
                    gold: s.typed_entities(&self.vocabs.class)?,
                })
            })
            .collect()
    }

    pub(crate) fn views(&self, g: &mut Graph, batch: &[&TokenIds]) -> Result<Vec<Views>> {
        let start = self.encoders.start.encode_batch(g, batch)?;
        let end = self.encoders.end.encode_batch(g, batch)?;
        let content = self.encoders.content.encode_batch(g, batch)?;
        let query = match self.config.query_init {
            QueryInit::Query => Some(self.encoders.query.encode_batch(g, batch)?),
            QueryInit::Zero | QueryInit::SharedContent => None,
        };
        (0..batch.len())
            .map(|i| {
                let proj = self.generator.project_content(g, content[i])?;
                Ok(Views {
                    start: start[i],
                    end: end[i],
                    query: query.as_ref().map(|q| q[i]),
                    content: content[i],
                    proj,
                })
            })
            .collect()
    }

    /// Initial generator state for the candidate `start`, `[1, d_t]`.
    pub(crate) fn query_row(&self, g: &mut Graph, views: &Views, start: usize) -> Result<Var> {
        match self.config.query_init {
            QueryInit::Query => {
                let q = views
                    .query
                    .ok_or_else(|| Error::Invalid("query view was not encoded".into()))?;
                g.rows(q, start, 1)
            }
            QueryInit::SharedContent => g.rows(views.content, start, 1),
            QueryInit::Zero => Ok(g.input(Tensor::zeros(&[1, self.generator.d_t()]))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabs, RawEntity};

    pub(crate) fn tiny_corpus() -> Vec<Sentence> {
        let s = |t: &[&str], e: &[(usize, usize, &str)]| {
            Sentence::new(
                t.iter().map(|x| x.to_string()).collect(),
                None,
                e.iter()
                    .map(|&(start, end, l)| RawEntity {
                        start,
                        end,
                        label: l.into(),
                    })
                    .collect(),
            )
            .unwrap()
        };
        vec![
            s(&["<per1", "ka", "per1>", "lo"], &[(0, 2, "PER")]),
            s(
                &["mi", "<org1", "<per2", "tu", "per1>", "org2>"],
                &[(1, 5, "ORG"), (2, 4, "PER")],
            ),
            s(&["sa"], &[]),
        ]
    }

    #[test]
    fn empty_class_vocab_is_rejected() {
        let sents = vec![Sentence::new(vec!["a".into()], None, vec![]).unwrap()];
        let v = build_vocabs(&sents, 1);
        assert!(matches!(
            Model::new(ModelConfig::default(), TrainConfig::default(), v, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_gold_class_is_incompatible() {
        let sents = tiny_corpus();
        let model = Model::new(
            ModelConfig::default(),
            TrainConfig::default(),
            build_vocabs(&sents, 1),
            1,
        )
        .unwrap();
        let other = Sentence::new(
            vec!["a".into()],
            None,
            vec![RawEntity {
                start: 0,
                end: 0,
                label: "GPE".into(),
            }],
        )
        .unwrap();
        assert!(matches!(
            model.prepare(&[other], None),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rates: LearningRates {
                    other: 0.0,
                    ..Default::default()
                },
                ..Default::default()
            },
            TrainConfig {
                end_threshold: Some(1.5),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn gold_by_start() {
        let sents = tiny_corpus();
        let model = Model::new(
            ModelConfig::default(),
            TrainConfig::default(),
            build_vocabs(&sents, 1),
            1,
        )
        .unwrap();
        let ex = model.prepare(&sents, None).unwrap();
        assert_eq!(ex[1].gold_starting_at(2).count(), 1);
        assert_eq!(ex[1].gold_starting_at(3).count(), 0);
    }
}
