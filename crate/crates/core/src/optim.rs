//! SGD-with-momentum and Adam, plus the learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    params: Vec<ParamId>,
    moments: BTreeMap<ParamId, Moments>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                let second = match config.kind {
                    OptimizerKind::Adam => vec![0.0; n],
                    OptimizerKind::SgdMomentum => Vec::new(),
                };
                (
                    id,
                    Moments {
                        first: vec![0.0; n],
                        second,
                    },
                )
            })
            .collect();
        OptimizerState {
            config,
            params,
            moments,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First-moment buffer for `id` (momentum velocity for SGD).
    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.moments.get(&id).map(|m| m.first.as_slice())
    }

    /// One update of every managed parameter at learning rate `lr`.
    /// Parameters the loss did not reach see a zero gradient. Refuses the
    /// whole step, leaving state untouched, if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let gathered: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|&id| grads.param_or_zeros(id, store.get(id).numel()))
            .collect();
        self.step_with(store, &gathered, lr)
    }

    /// Like [`step`](Self::step) with explicit per-parameter gradients in
    /// `params()` order.
    pub fn step_with(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim("optimizer_step", "gradient count", self.params.len(), grads.len()));
        }
        for (&id, g) in self.params.iter().zip(grads) {
            let n = store.get(id).numel();
            if g.len() != n {
                return Err(Error::dim("optimizer_step", store.name(id).to_string(), n, g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::PoisonedState {
                    term: format!("gradient of {}", store.name(id)),
                });
            }
        }
        self.step += 1;
        let cfg = self.config;
        for (&id, g) in self.params.iter().zip(grads) {
            let m = self.moments.get_mut(&id).expect("moment buffers cover params");
            let p = store.get_mut(id);
            p.grad = Some(g.clone());
            let data = p.data_mut();
            match cfg.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, v), gi) in data.iter_mut().zip(m.first.iter_mut()).zip(g) {
                        *v = cfg.momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.step as i32;
                    let bc1 = 1.0 - cfg.beta1.powi(t);
                    let bc2 = 1.0 - cfg.beta2.powi(t);
                    for (((w, m1), m2), gi) in data.iter_mut().zip(m.first.iter_mut()).zip(m.second.iter_mut()).zip(g) {
                        *m1 = cfg.beta1 * *m1 + (1.0 - cfg.beta1) * gi;
                        *m2 = cfg.beta2 * *m2 + (1.0 - cfg.beta2) * gi * gi;
                        let mhat = *m1 / bc1;
                        let vhat = *m2 / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from 0 to the base rate over `warmup_epochs`, flat afterwards.
    Warmup { warmup_epochs: u32 },
    /// Multiply by `gamma` once `epoch >= milestone`.
    Step { milestone: u32, gamma: f64 },
}

pub fn lr_schedule(epoch: u32, base: f64, schedule: &LrSchedule) -> f64 {
    match *schedule {
        LrSchedule::Constant => base,
        LrSchedule::Warmup { warmup_epochs } => {
            if warmup_epochs == 0 {
                base
            } else {
                base * (epoch as f64 / warmup_epochs as f64).min(1.0)
            }
        }
        LrSchedule::Step { milestone, gamma } => {
            if epoch >= milestone {
                base * gamma
            } else {
                base
            }
        }
    }
}
