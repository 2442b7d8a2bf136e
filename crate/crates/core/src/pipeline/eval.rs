use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::predict::{predict_batch, PredictOptions};
use super::{Example, Model};
use crate::corpus::Entity;
use crate::detectors::end_filter;
use crate::error::{Error, Result};

/// The threshold grid of a default sweep; `None` is the unfiltered setting.
pub const DEFAULT_THRESHOLDS: [Option<f64>; 5] = [None, Some(0.1), Some(0.2), Some(0.5), Some(0.8)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Scores {
    /// Strict scores from counts. With nothing predicted and nothing to
    /// find, all three are 1.
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                if predicted == 0 && gold == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_class: BTreeMap<String, Scores>,
}

/// Micro-averaged strict precision, recall and F1: a prediction counts only
/// when start, end and class all match a gold entity of the same sentence.
pub fn evaluate(
    predictions: &[BTreeSet<Entity>],
    golds: &[BTreeSet<Entity>],
    class_names: &[String],
) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predicted sentences vs {} gold sentences",
            predictions.len(),
            golds.len()
        )));
    }
    let n = class_names.len();
    let (mut tp, mut pred, mut gold) = (
        vec![0usize; n + 1],
        vec![0usize; n + 1],
        vec![0usize; n + 1],
    );
    let slot = |c: usize| c.min(n);
    for (p, g) in predictions.iter().zip(golds) {
        for e in p {
            pred[slot(e.class_id)] += 1;
            if g.contains(e) {
                tp[slot(e.class_id)] += 1;
            }
        }
        for e in g {
            gold[slot(e.class_id)] += 1;
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let overall = Scores::from_counts(sum(&tp), sum(&pred), sum(&gold));
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), Scores::from_counts(tp[c], pred[c], gold[c])))
        .collect();
    Ok(EvalReport { overall, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: Option<f64>,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// One report per end threshold. Decoding runs once; each threshold only
/// re-filters, which equals predicting with that threshold.
pub fn threshold_sweep(
    model: &Model,
    examples: &[Example],
    thresholds: &[Option<f64>],
    lambda: f64,
) -> Result<Vec<SweepRow>> {
    let ids: Vec<_> = examples.iter().map(|e| &e.ids).collect();
    let opts = PredictOptions {
        lambda,
        threshold: None,
    };
    let preds = predict_batch(model, &ids, opts)?;
    let golds: Vec<BTreeSet<Entity>> = examples.iter().map(|e| e.gold.clone()).collect();
    thresholds
        .iter()
        .map(|&t| {
            let filtered: Vec<BTreeSet<Entity>> = preds
                .iter()
                .map(|p| end_filter(&p.unfiltered, &p.end_probs, t))
                .collect();
            Ok(SweepRow {
                threshold: t,
                report: evaluate(&filtered, &golds, model.class_names())?,
            })
        })
        .collect()
}
