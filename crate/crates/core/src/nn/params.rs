use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    /// Stand-in for the contextual language-model encoder.
    Contextual,
    /// Word vectors that would normally come pretrained.
    Pretrained,
    Other,
}

impl LrGroup {
    pub const ALL: [LrGroup; 3] = [LrGroup::Contextual, LrGroup::Pretrained, LrGroup::Other];

    pub fn index(self) -> usize {
        match self {
            LrGroup::Contextual => 0,
            LrGroup::Pretrained => 1,
            LrGroup::Other => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub group: LrGroup,
}

/// Named parameters of a model. Names are unique; ids are dense and stable
/// in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: LrGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
            group,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Uniform in ±1/√fan_in.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_parts(rows, cols, data)
}

/// Unit-variance uniform initialization for embedding tables.
pub fn uniform_embedding<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 3f64.sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_parts(rows, cols, data)
}
