//! Named parameter storage shared by the model components.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Every learnable tensor and running-statistic buffer of a model.
///
/// Buffers (batch-norm running statistics) are stored with
/// `requires_grad == false` and are never handed to an optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, requires_grad: bool) -> ParamId {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.params.push(Parameter {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-uniform (fan-in, ReLU gain) weights.
    pub fn add_kaiming<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.add_uniform(name, shape, bound, rng)
    }

    /// Bias init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_bias<R: Rng>(&mut self, name: impl Into<String>, len: usize, fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add_uniform(name, &[len], bound, rng)
    }

    fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrites a tensor's values, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.numel() != values.len() {
            return Err(Error::dim("set_values", p.name.clone(), p.tensor.numel(), values.len()));
        }
        p.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Applies running-statistic updates collected by a train-mode forward pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let m = self.get_mut(u.mean);
            for (r, b) in m.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
            let v = self.get_mut(u.var);
            for (r, b) in v.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
        }
    }
}

/// Pending batch-norm running-statistic update.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}
