//! Scalar objectives and their value-level counterparts.
//!
//! The `Var` functions build differentiable terms on a [`Tape`]; the
//! `Tensor`/slice functions evaluate the same quantities directly on
//! probabilities, for reporting and for checks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to probabilities inside logarithms.
pub const POSTERIOR_FLOOR: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    IdS,
    IndisDom,
    DomV,
    IndisId,
    Invar,
    InvarV,
    IdV,
    DomS,
    Recon,
}

impl LossName {
    pub fn as_str(self) -> &'static str {
        match self {
            LossName::IdS => "id_s",
            LossName::IndisDom => "indis_dom",
            LossName::DomV => "dom_v",
            LossName::IndisId => "indis_id",
            LossName::Invar => "invar",
            LossName::InvarV => "invar_v",
            LossName::IdV => "id_v",
            LossName::DomS => "dom_s",
            LossName::Recon => "recon",
        }
    }
}

impl std::fmt::Display for LossName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub name: LossName,
    pub value: f64,
    pub batch_size: usize,
}

#[derive(Serialize)]
struct LossRow<'a> {
    step: u64,
    phase: u8,
    name: &'a str,
    value: f64,
}

/// Writes one `{step, phase, name, value}` JSON object per line.
pub fn write_loss_rows<W: Write>(out: &mut W, step: u64, phase: u8, reports: &[LossReport]) -> Result<()> {
    for r in reports {
        let row = LossRow {
            step,
            phase,
            name: r.name.as_str(),
            value: r.value,
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Batch-mean cross-entropy against `(1 - eps) * onehot + eps / C`.
pub fn ce_label_smoothing(tape: &mut Tape, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    tape.cross_entropy(logits, targets, epsilon, Reduction::Mean)
}

/// Negative conditional entropy of the softmax posterior, batch-meaned.
pub fn indistinguishability(tape: &mut Tape, logits: Var) -> Result<Var> {
    let h = tape.entropy(logits, Reduction::Mean)?;
    Ok(tape.scale(h, -1.0))
}

/// Cross-entropy summed over the K adjustments of logits shaped `[K, N, M]`.
/// `Mean` divides by N only.
pub fn invar_loss(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64, reduction: Reduction) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [k, n, m] = shape[..] else {
        return Err(Error::Contract(format!("invar_loss expects [K, N, M] logits, got {shape:?}")));
    };
    if k == 0 {
        return Err(Error::Contract("invar_loss needs K >= 1".into()));
    }
    if targets.len() != n {
        return Err(Error::dim("invar_loss", "batch", n, targets.len()));
    }
    let flat = tape.reshape(logits, vec![k * n, m])?;
    let repeated: Vec<usize> = (0..k).flat_map(|_| targets.iter().copied()).collect();
    let total = tape.cross_entropy(flat, &repeated, smoothing, Reduction::Sum)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / n as f64),
    })
}

/// Mean squared error.
pub fn recon_loss(tape: &mut Tape, reconstruction: Var, target: Var) -> Result<Var> {
    tape.mse(reconstruction, target)
}

/// Entropy of one probability row, natural log, floored.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&q| if q > 0.0 { q * q.max(POSTERIOR_FLOOR).ln() } else { 0.0 }).sum::<f64>()
}

/// `-Σ q_k ln p_k` for a soft target `q`.
pub fn soft_cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(&pk, &qk)| qk * pk.max(POSTERIOR_FLOOR).ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Entropy {
    /// Batch sum `Σ_i H(p_i)`.
    pub total: f64,
    /// Per-sample mean.
    pub mean: f64,
}

impl Entropy {
    /// The indistinguishability loss `-H`, batch-summed.
    pub fn loss(&self) -> f64 {
        -self.total
    }
}

fn check_rows(posteriors: &Tensor, op: &str) -> Result<(usize, usize)> {
    let [n, c] = posteriors.shape()[..] else {
        return Err(Error::Contract(format!("{op} expects [N, C] posteriors, got {:?}", posteriors.shape())));
    };
    for i in 0..n {
        let row = posteriors.row(i);
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!("{op}: row {i} has a negative or NaN entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("{op}: row {i} sums to {s}")));
        }
    }
    Ok((n, c))
}

/// `H(D|S) = Σ_i Σ_k -p_ik ln p_ik` over normalized posterior rows.
pub fn conditional_entropy(posteriors: &Tensor) -> Result<Entropy> {
    let (n, _) = check_rows(posteriors, "conditional_entropy")?;
    let total: f64 = (0..n).map(|i| row_entropy(posteriors.row(i))).sum();
    Ok(Entropy {
        total,
        mean: total / n as f64,
    })
}

/// Outcome of gradient descent on the indistinguishability loss of one free posterior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyDescent {
    pub posterior: Vec<f64>,
    /// Final `-H(p)`.
    pub loss: f64,
    pub steps: usize,
    /// `max_k |p_k - 1/K|`.
    pub deviation: f64,
}

/// Minimizes `-H(softmax(z))` over free logits `z` from `start`, stopping once
/// every entry is within `tol` of uniform or after `max_steps`.
pub fn entropy_descent(start: &[f64], lr: f64, max_steps: usize, tol: f64) -> Result<EntropyDescent> {
    let k = start.len();
    if k < 2 {
        return Err(Error::Contract("entropy_descent needs at least 2 classes".into()));
    }
    let mut z = start.to_vec();
    let mut steps = 0;
    loop {
        let mut tape = Tape::new();
        let zv = tape.variable(Tensor::new(vec![1, k], z.clone())?);
        let loss = indistinguishability(&mut tape, zv)?;
        let p = tape.softmax(zv)?;
        let posterior = tape.value(p).data().to_vec();
        let deviation = posterior.iter().map(|q| (q - 1.0 / k as f64).abs()).fold(0.0, f64::max);
        let value = tape.value(loss).item();
        if deviation < tol || steps == max_steps {
            return Ok(EntropyDescent {
                posterior,
                loss: value,
                steps,
                deviation,
            });
        }
        let grads = tape.backward(loss)?;
        let g = grads.wrt(zv).ok_or_else(|| Error::Contract("free logits received no gradient".into()))?;
        for (zi, gi) in z.iter_mut().zip(g) {
            *zi -= lr * gi;
        }
        steps += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiEstimate {
    pub i_hat: f64,
    pub h_d: f64,
    pub h_d_given_s: f64,
}

/// Plug-in `I(S; D) = H(D) - H(D|S)`. `H(D)` comes from the label marginal
/// alone; `H(D|S)` is the per-sample mean posterior entropy.
pub fn mi_plugin(posteriors: &Tensor, domain_labels: &[usize]) -> Result<MiEstimate> {
    if posteriors.shape().first() == Some(&0) || domain_labels.is_empty() {
        return Err(Error::DegenerateBatch {
            op: "mi_plugin",
            count: 0,
        });
    }
    let (n, g) = check_rows(posteriors, "mi_plugin")?;
    if domain_labels.len() != n {
        return Err(Error::dim("mi_plugin", "batch", n, domain_labels.len()));
    }
    let mut counts = vec![0usize; g];
    for &d in domain_labels {
        if d >= g {
            return Err(Error::Contract(format!("domain label {d} out of range for {g} classes")));
        }
        counts[d] += 1;
    }
    let marginal: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let h_d = row_entropy(&marginal);
    let h_d_given_s = conditional_entropy(posteriors)?.mean;
    Ok(MiEstimate {
        i_hat: h_d - h_d_given_s,
        h_d,
        h_d_given_s,
    })
}
