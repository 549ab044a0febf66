//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op executed in a forward pass as a node holding the
//! output value, the input handles and whatever the backward rule needs.
//! [`Tape::backward`] replays the nodes in reverse, visiting each exactly once,
//! and sums gradient contributions across fan-out.

mod kernels;
mod nn;
mod ops;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, StatUpdate};
use crate::tensor::Tensor;

pub use nn::BatchNormMode;
pub use ops::Reduction;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
        geom: kernels::ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: kernels::ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MixRows {
        input: Var,
        first: Vec<usize>,
        second: Vec<usize>,
        alpha: f64,
    },
    GradReverse {
        input: Var,
        lambda: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Square {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    LogSoftmax {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        smoothing: f64,
        scale: f64,
    },
    Entropy {
        logits: Var,
        probs: Vec<f64>,
        log_probs: Vec<f64>,
        row_entropy: Vec<f64>,
        scale: f64,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which parameters become differentiable leaves when a module reads them.
#[derive(Debug, Clone)]
enum Trainable {
    All,
    Only(BTreeSet<ParamId>),
    None,
}

/// Record of a forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    trainable: Trainable,
    stat_updates: Vec<StatUpdate>,
    /// When false, ops skip saving backward context.
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which every parameter read is differentiable.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            trainable: Trainable::All,
            stat_updates: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which only the listed parameters are differentiable; others
    /// enter as constants (gradients still flow *through* them to their inputs).
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Tape {
            trainable: Trainable::Only(ids.into_iter().collect()),
            ..Self::new()
        }
    }

    /// Inference-only tape: nothing requires grad and no backward context is kept.
    pub fn no_grad() -> Self {
        Tape {
            trainable: Trainable::None,
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// Reads a parameter from the store onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let trainable = self.grad_enabled
            && t.requires_grad
            && match &self.trainable {
                Trainable::All => true,
                Trainable::Only(set) => set.contains(&id),
                Trainable::None => false,
            };
        let mut value = t.clone();
        value.grad = None;
        if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes an op result; it requires grad iff any listed input does.
    pub(crate) fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        let op = if rg { op } else { Op::Leaf };
        self.push(value, op, rg)
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {numel} elements")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                op => {
                    let mut sink = GradSink {
                        tape: self,
                        grads: &mut grads,
                    };
                    ops::backward_op(op, &node.value, &g, &mut sink);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Accumulates gradient contributions into a node's slot.
pub(crate) struct GradSink<'a> {
    tape: &'a Tape,
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.tape.requires_grad(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn add(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.tape.requires_grad(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tape node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient for `id`, or zeros of `len` when the parameter was not reached.
    pub fn param_or_zeros(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.param(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Writes parameter gradients into the store's `grad` slots. Trainable
    /// parameters that were not reached get zeros.
    pub fn store_into(&self, store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let n = store.get(id).numel();
            store.get_mut(id).grad = Some(self.param_or_zeros(id, n));
        }
    }
}
