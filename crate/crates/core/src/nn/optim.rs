//! AdamW with decoupled weight decay, and the linear warmup-decay schedule.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, LrGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |_: ()| {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `lr` gives the rate of each [`LrGroup`].
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: impl Fn(LrGroup) -> f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let (trainable, group) = {
                let p = store.get(id);
                (p.trainable, p.group)
            };
            let value = store.value_mut(id).data_mut();
            if value.len() != g.len() || self.first[i].len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter {i}: gradient size mismatch"
                )));
            }
            if !trainable {
                continue;
            }
            let rate = lr(group);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= rate * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * value[k]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to the base rate over `warmup` steps, then linear decay to
/// zero at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Base rates indexed by [`LrGroup::index`].
    pub base: [f64; 3],
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(base: [f64; 3], warmup: u64, total: u64) -> Result<Self> {
        if total <= warmup {
            return Err(Error::Config(format!(
                "schedule needs total steps ({total}) > warmup steps ({warmup})"
            )));
        }
        Ok(LrSchedule {
            base,
            warmup,
            total,
        })
    }

    /// Multiplier applied to every base rate at `step`.
    pub fn factor(&self, step: u64) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            step as f64 / self.warmup as f64
        } else {
            (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }

    pub fn rate(&self, step: u64, group: LrGroup) -> f64 {
        self.base[group.index()] * self.factor(step)
    }

    pub fn rates_at(&self, step: u64) -> [f64; 3] {
        let f = self.factor(step);
        self.base.map(|b| b * f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn store_with(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::row_vector(vec![v]), LrGroup::Other)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = store_with(0.7);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let grads = store.zero_grads();
        for _ in 0..3 {
            opt.step(&mut store, &grads, |_| 0.1).unwrap();
        }
        assert_eq!(store.value(store.id("theta").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = store_with(0.7);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut grads = store.zero_grads();
        grads.get_mut(store.id("theta").unwrap())[0] = 3.0;
        opt.step(&mut store, &grads, |_| 0.0).unwrap();
        assert_eq!(store.value(store.id("theta").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        for g in [-4.0, 0.25, 17.0] {
            let mut store = store_with(1.0);
            let id = store.id("theta").unwrap();
            let mut opt = AdamW::new(
                &store,
                AdamWConfig {
                    weight_decay: 0.0,
                    ..Default::default()
                },
            );
            let mut grads = store.zero_grads();
            grads.get_mut(id)[0] = g;
            opt.step(&mut store, &grads, |_| 0.01).unwrap();
            let moved = store.value(id).data()[0] - 1.0;
            assert!(
                (moved + f64::signum(g) * 0.01).abs() < 1e-9,
                "g={g} moved={moved}"
            );
        }
    }

    /// Independent scalar transcription of the update rule.
    fn reference_adamw(theta0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * (mh / (vh.sqrt() + eps) + wd * th);
        }
        th
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = store_with(1.0);
        let id = store.id("theta").unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        for _ in 0..200 {
            let mut grads = store.zero_grads();
            grads.get_mut(id)[0] = 2.0 * store.value(id).data()[0];
            opt.step(&mut store, &grads, |_| 0.1).unwrap();
        }
        let theta = store.value(id).data()[0];
        assert!(theta.abs() < 0.05, "theta = {theta}");
        assert!((theta - reference_adamw(1.0, 0.1, 200)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut store = store_with(0.5);
        let id = store.id("theta").unwrap();
        store.get_mut(id).trainable = false;
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut grads = store.zero_grads();
        grads.get_mut(id)[0] = 1.0;
        opt.step(&mut store, &grads, |_| 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[0.5]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new([1e-5, 1e-6, 2e-4], 10, 100).unwrap();
        assert_eq!(s.rate(0, LrGroup::Other), 0.0);
        assert_eq!(s.rate(10, LrGroup::Other), 2e-4);
        assert_eq!(s.rate(100, LrGroup::Other), 0.0);
        assert!((s.rate(5, LrGroup::Contextual) - 5e-6).abs() < 1e-18);
        assert!((s.rate(55, LrGroup::Pretrained) - 0.5e-6).abs() < 1e-18);
        assert!(LrSchedule::new([1.0; 3], 10, 10).is_err());
    }
}
