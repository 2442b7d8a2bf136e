//! Start and end token estimators, candidate sampling and end filtering.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Entity;
use crate::error::{Error, Result};
use crate::nn::{focal_loss, Activation, Ffn, Graph, LrGroup, ParamStore, Var};

/// Probabilities above this count towards the sampling budget.
pub const SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Start,
    End,
}

/// Per-token probability of being an entity boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub which: Boundary,
    pub probs: Vec<f64>,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `sigmoid(FFN(t_i))` per token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimator {
    pub which: Boundary,
    pub ffn: Ffn,
}

impl Estimator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        which: Boundary,
        d_t: usize,
        hidden: usize,
    ) -> Result<Self> {
        let name = match which {
            Boundary::Start => "start_estimator",
            Boundary::End => "end_estimator",
        };
        let ffn = Ffn::new(
            store,
            rng,
            name,
            d_t,
            hidden,
            1,
            Activation::Relu,
            LrGroup::Other,
        )?;
        Ok(Estimator { which, ffn })
    }

    /// Probabilities `[n, 1]` for the token representations `reprs: [n, d_t]`.
    pub fn forward(&self, g: &mut Graph, reprs: Var) -> Result<Var> {
        let logits = self.ffn.forward(g, reprs)?;
        Ok(g.sigmoid(logits))
    }

    pub fn score_tokens(&self, g: &mut Graph, reprs: Var) -> Result<TokenScores> {
        let p = self.forward(g, reprs)?;
        Ok(TokenScores {
            which: self.which,
            probs: g.value(p).data().to_vec(),
        })
    }
}

/// 1 where a gold entity starts (or ends), 0 elsewhere.
pub fn estimator_labels<'a>(
    entities: impl IntoIterator<Item = &'a Entity>,
    len: usize,
    which: Boundary,
) -> Vec<f64> {
    let mut y = vec![0.0; len];
    for e in entities {
        let i = match which {
            Boundary::Start => e.start,
            Boundary::End => e.end,
        };
        if i < len {
            y[i] = 1.0;
        }
    }
    y
}

/// Summed focal loss over tokens.
pub fn estimator_loss(probs: &[f64], labels: &[f64], gamma: f64) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_loss(p, y, gamma))
        .sum())
}

/// Token indices to query.
///
/// With `n` tokens scoring above 0.5, the `⌈λ·n⌉` best-scoring tokens are
/// taken (ties to the lower index, at most the sentence length). Gold
/// starts, when given, are always added.
pub fn sample_candidates(
    probs: &[f64],
    lambda: f64,
    gold_starts: Option<&BTreeSet<usize>>,
) -> BTreeSet<usize> {
    let n = probs.iter().filter(|&&p| p > SCORE_THRESHOLD).count();
    let k = ((lambda * n as f64).ceil() as usize).min(probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out: BTreeSet<usize> = order.into_iter().take(k).collect();
    if let Some(gold) = gold_starts {
        out.extend(gold.iter().copied());
    }
    out
}

/// Keeps entities whose end token scores at least `threshold`; `None`
/// keeps everything.
pub fn end_filter(
    entities: &BTreeSet<Entity>,
    end_probs: &[f64],
    threshold: Option<f64>,
) -> BTreeSet<Entity> {
    match threshold {
        None => entities.clone(),
        Some(t) => entities
            .iter()
            .filter(|e| end_probs.get(e.end).is_some_and(|&p| p >= t))
            .copied()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{binary_cross_entropy, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ents(list: &[(usize, usize, usize)]) -> BTreeSet<Entity> {
        list.iter().map(|&(s, e, c)| Entity::new(s, e, c)).collect()
    }

    #[test]
    fn zero_parameters_score_one_half() {
        let mut store = ParamStore::new();
        let est = Estimator::new(
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(1),
            Boundary::Start,
            4,
            3,
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x =
            g.input(Tensor::matrix(2, 4, vec![1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 7.0, 1.0]).unwrap());
        assert_eq!(est.score_tokens(&mut g, x).unwrap().probs, vec![0.5, 0.5]);
    }

    #[test]
    fn labels() {
        let e = ents(&[(2, 4, 0), (2, 2, 1)]);
        assert_eq!(
            estimator_labels(&e, 6, Boundary::Start),
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            estimator_labels(&e, 6, Boundary::End),
            vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(estimator_labels(&ents(&[]), 3, Boundary::End), vec![0.0; 3]);
        let e = ents(&[(0, 5, 0), (1, 3, 1)]);
        assert_eq!(
            estimator_labels(&e, 6, Boundary::Start),
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            estimator_labels(&e, 6, Boundary::End),
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn loss_values() {
        assert!(estimator_loss(&[1.0, 0.0], &[1.0, 0.0], 0.9).unwrap() < 1e-6);
        let probs = [0.2, 0.7, 0.9];
        let labels = [0.0, 1.0, 1.0];
        let bce: f64 = probs
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| binary_cross_entropy(p, y))
            .sum();
        assert!((estimator_loss(&probs, &labels, 0.0).unwrap() - bce).abs() < 1e-12);
        let half = estimator_loss(&[0.5, 0.5], &[1.0, 0.0], 0.9).unwrap();
        assert!((half - 2.0 * 0.371448).abs() < 1e-5, "{half}");
        assert!(estimator_loss(&[0.5], &[1.0, 0.0], 0.9).is_err());
    }

    #[test]
    fn sampling() {
        let got = sample_candidates(&[0.9, 0.6, 0.4, 0.1], 1.5, None);
        assert_eq!(got, [0, 1, 2].into_iter().collect());
        assert!(sample_candidates(&[0.4, 0.1, 0.3], 1.5, None).is_empty());
        let gold: BTreeSet<usize> = [3].into_iter().collect();
        assert_eq!(
            sample_candidates(&[0.4, 0.1, 0.3, 0.2], 3.0, Some(&gold)),
            gold
        );
    }

    #[test]
    fn sampling_ties_and_cap() {
        assert_eq!(
            sample_candidates(&[0.6, 0.3, 0.3, 0.3], 2.0, None),
            [0, 1].into_iter().collect()
        );
        assert_eq!(sample_candidates(&[0.6, 0.7], 3.0, None).len(), 2);
    }

    #[test]
    fn filtering() {
        let e = ents(&[(0, 1, 0), (0, 2, 0)]);
        let probs = [0.9, 0.15, 0.5];
        assert_eq!(end_filter(&e, &probs, None), e);
        assert_eq!(end_filter(&e, &probs, Some(0.2)), ents(&[(0, 2, 0)]));
        assert_eq!(end_filter(&e, &probs, Some(0.0)), e);
    }
}
