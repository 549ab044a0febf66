//! Central finite-difference gradient checks.
//!
//! The oracle only ever calls the forward pass: it perturbs each input entry
//! by `±h` and differences the scalar objective. Non-scalar ops are reduced to
//! a scalar by a fixed random projection `sum(out ⊙ R)`, which checks the full
//! vector-Jacobian product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{BatchNormMode, Reduction, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Central-difference gradient of `f` at `inputs`, one vector per input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Reverse-mode gradient of `f` at `inputs`, one vector per input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect())
}

/// Largest relative error over all inputs of `f`.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(inputs, &f)?;
    let n = numeric_gradients(inputs, &f, DEFAULT_STEP)?;
    Ok(a.iter().zip(&n).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max))
}

/// `sum(v ⊙ r)` for a fixed projection tensor `r`.
pub fn project(tape: &mut Tape, v: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.input(r.clone());
    let shaped = if tape.shape(v) == r.shape() {
        v
    } else {
        tape.reshape(v, r.shape().to_vec())?
    };
    let m = tape.mul(shaped, rv)?;
    Ok(tape.sum(m))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values in `[-2, 2]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Distinct values spaced at least 0.01 apart, so pooling windows have no near-ties.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n.max(1) as f64).collect();
    levels.shuffle(rng);
    let step = 4.0 / n.max(1) as f64;
    let data = levels.into_iter().map(|v| v + rng.gen_range(0.0..0.3 * step)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn cases() -> Vec<(&'static str, Case)> {
    fn sz(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
        rng.gen_range(lo..=hi)
    }
    vec![
        (
            "conv2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c, o, k) = (sz(rng, 1, 2), sz(rng, 1, 3), sz(rng, 1, 3), sz(rng, 1, 3));
                let (h, w) = (k + sz(rng, 0, 3), k + sz(rng, 0, 3));
                let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
                let wt = uniform(rng, &[o, c, k, k], -2.0, 2.0);
                let b = uniform(rng, &[o], -2.0, 2.0);
                let r = uniform(rng, &[n, o, h - k + 1, w - k + 1], -1.0, 1.0);
                check(&[x, wt, b], |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2])?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "conv_transpose2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c, o, k) = (sz(rng, 1, 2), sz(rng, 1, 3), sz(rng, 1, 3), sz(rng, 1, 3));
                let (h, w) = (sz(rng, 1, 4), sz(rng, 1, 4));
                let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
                let wt = uniform(rng, &[c, o, k, k], -2.0, 2.0);
                let b = uniform(rng, &[o], -2.0, 2.0);
                let r = uniform(rng, &[n, o, h + k - 1, w + k - 1], -1.0, 1.0);
                check(&[x, wt, b], |t, v| {
                    let y = t.conv_transpose2d(v[0], v[1], v[2])?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "batch_norm_train",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c, h, w) = (sz(rng, 2, 3), sz(rng, 1, 3), sz(rng, 1, 3), sz(rng, 1, 3));
                let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
                let g = uniform(rng, &[c], -2.0, 2.0);
                let b = uniform(rng, &[c], -2.0, 2.0);
                let r = uniform(rng, &[n, c, h, w], -1.0, 1.0);
                let (store, rm, rv) = bn_store(c);
                check(&[x, g, b], |t, v| {
                    let y = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, &store, rm, rv)?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "batch_norm_eval",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c, h, w) = (sz(rng, 1, 3), sz(rng, 1, 3), sz(rng, 1, 3), sz(rng, 1, 3));
                let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
                let g = uniform(rng, &[c], -2.0, 2.0);
                let b = uniform(rng, &[c], -2.0, 2.0);
                let r = uniform(rng, &[n, c, h, w], -1.0, 1.0);
                let (mut store, rm, rv) = bn_store(c);
                let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
                store.set_values(rm, &mean)?;
                store.set_values(rv, &var)?;
                check(&[x, g, b], |t, v| {
                    let y = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval, &store, rm, rv)?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "max_pool2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c) = (sz(rng, 1, 2), sz(rng, 1, 2));
                let (h, w) = (sz(rng, 2, 6), sz(rng, 2, 6));
                let x = distinct(rng, &[n, c, h, w]);
                let r = uniform(rng, &[n, c, h / 2, w / 2], -1.0, 1.0);
                check(&[x], |t, v| {
                    let y = t.max_pool2d(v[0], 2, 2)?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "upsample2x",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c, h, w) = (sz(rng, 1, 2), sz(rng, 1, 2), sz(rng, 1, 3), sz(rng, 1, 3));
                let x = uniform(rng, &[n, c, h, w], -2.0, 2.0);
                let r = uniform(rng, &[n, c, 2 * h, 2 * w], -1.0, 1.0);
                check(&[x], |t, v| {
                    let y = t.upsample2x(v[0])?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "linear",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, f, o) = (sz(rng, 1, 4), sz(rng, 1, 5), sz(rng, 1, 4));
                let x = uniform(rng, &[n, f], -2.0, 2.0);
                let w = uniform(rng, &[o, f], -2.0, 2.0);
                let b = uniform(rng, &[o], -2.0, 2.0);
                let r = uniform(rng, &[n, o], -1.0, 1.0);
                check(&[x, w, b], |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "relu",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 4), sz(rng, 1, 5)];
                let x = away_from_zero(rng, &shape, 1e-3);
                let r = uniform(rng, &shape, -1.0, 1.0);
                check(&[x], |t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, &r)
                })
            }),
        ),
        (
            "softmax",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 4), sz(rng, 2, 6)];
                let x = uniform(rng, &shape, -2.0, 2.0);
                let r = uniform(rng, &shape, -1.0, 1.0);
                check(&[x], |t, v| {
                    let y = t.softmax(v[0])?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "log_softmax",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 4), sz(rng, 2, 6)];
                let x = uniform(rng, &shape, -2.0, 2.0);
                let r = uniform(rng, &shape, -1.0, 1.0);
                check(&[x], |t, v| {
                    let y = t.log_softmax(v[0])?;
                    project(t, y, &r)
                })
            }),
        ),
        (
            "concat_cols",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, a, b) = (sz(rng, 1, 4), sz(rng, 1, 3), sz(rng, 1, 3));
                let x = uniform(rng, &[n, a], -2.0, 2.0);
                let y = uniform(rng, &[n, b], -2.0, 2.0);
                let r = uniform(rng, &[n, a + b], -1.0, 1.0);
                check(&[x, y], |t, v| {
                    let z = t.concat_cols(v[0], v[1])?;
                    project(t, z, &r)
                })
            }),
        ),
        (
            "mix_rows",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c, m) = (sz(rng, 2, 5), sz(rng, 1, 3), sz(rng, 1, 6));
                let x = uniform(rng, &[n, c], -2.0, 2.0);
                let first: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
                let second: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
                let alpha = rng.gen_range(0.0..1.0);
                let r = uniform(rng, &[m, c], -1.0, 1.0);
                check(&[x], |t, v| {
                    let z = t.mix_rows(v[0], first.clone(), second.clone(), alpha)?;
                    project(t, z, &r)
                })
            }),
        ),
        (
            "elementwise",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 3), sz(rng, 1, 4)];
                let a = uniform(rng, &shape, -2.0, 2.0);
                let b = uniform(rng, &shape, -2.0, 2.0);
                let r = uniform(rng, &shape, -1.0, 1.0);
                let factor = rng.gen_range(-2.0..2.0);
                check(&[a, b], |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let d = t.sub(s, v[1])?;
                    let p = t.mul(d, v[1])?;
                    let q = t.square(p);
                    let sc = t.scale(q, factor);
                    let total = project(t, sc, &r)?;
                    let m = t.mean(v[0]);
                    t.add(total, m)
                })
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c) = (sz(rng, 1, 5), sz(rng, 2, 6));
                let x = uniform(rng, &[n, c], -2.0, 2.0);
                let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
                let eps = if rng.gen_bool(0.5) { 0.1 } else { 0.0 };
                let red = if rng.gen_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
                check(&[x], |t, v| t.cross_entropy(v[0], &targets, eps, red))
            }),
        ),
        (
            "entropy",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (n, c) = (sz(rng, 1, 5), sz(rng, 2, 6));
                let x = uniform(rng, &[n, c], -2.0, 2.0);
                let red = if rng.gen_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
                check(&[x], |t, v| t.entropy(v[0], red))
            }),
        ),
        (
            "mse",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 3), sz(rng, 1, 2), sz(rng, 1, 4), sz(rng, 1, 4)];
                let a = uniform(rng, &shape, -2.0, 2.0);
                let b = uniform(rng, &shape, -2.0, 2.0);
                check(&[a, b], |t, v| t.mse(v[0], v[1]))
            }),
        ),
        (
            "grad_reverse",
            Box::new(|rng: &mut ChaCha8Rng| {
                // Reversal is checked against -lambda times the finite-difference
                // gradient of the same objective without the reversal.
                let shape = [sz(rng, 1, 4), sz(rng, 2, 4)];
                let x = uniform(rng, &shape, -2.0, 2.0);
                let targets: Vec<usize> = (0..shape[0]).map(|_| rng.gen_range(0..shape[1])).collect();
                let lambda = rng.gen_range(0.0..2.0);
                let reversed = analytic_gradients(std::slice::from_ref(&x), &|t: &mut Tape, v: &[Var]| {
                    let z = t.grad_reverse(v[0], lambda)?;
                    t.cross_entropy(z, &targets, 0.0, Reduction::Mean)
                })?;
                let plain = numeric_gradients(
                    &[x],
                    &|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &targets, 0.0, Reduction::Mean),
                    DEFAULT_STEP,
                )?;
                let expected: Vec<f64> = plain[0].iter().map(|g| -lambda * g).collect();
                Ok(relative_error(&reversed[0], &expected))
            }),
        ),
        (
            "reshape_gather_sum",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 4), sz(rng, 1, 2), sz(rng, 1, 3), sz(rng, 1, 3)];
                let x = uniform(rng, &shape, -2.0, 2.0);
                let n = shape[0];
                let idx: Vec<usize> = (0..sz(rng, 1, 5)).map(|_| rng.gen_range(0..n)).collect();
                let width = shape[1..].iter().product::<usize>();
                let r = uniform(rng, &[idx.len(), width], -1.0, 1.0);
                let (w1, w2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                check(&[x], |t, v| {
                    let f = t.flatten(v[0])?;
                    let back = t.reshape(f, shape.to_vec())?;
                    let f2 = t.flatten(back)?;
                    let g = t.gather_rows(f2, idx.clone())?;
                    let proj = project(t, g, &r)?;
                    let total = t.sum(v[0]);
                    t.weighted_sum(&[(w1, proj), (w2, total)])
                })
            }),
        ),
        (
            "invar_loss",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (k, n, m) = (sz(rng, 1, 4), sz(rng, 1, 4), sz(rng, 2, 5));
                let x = uniform(rng, &[k, n, m], -2.0, 2.0);
                let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
                let eps = if rng.gen_bool(0.5) { 0.1 } else { 0.0 };
                let red = if rng.gen_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
                check(&[x], |t, v| crate::losses::invar_loss(t, v[0], &targets, eps, red))
            }),
        ),
        (
            "indistinguishability",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 5), sz(rng, 2, 6)];
                let x = uniform(rng, &shape, -2.0, 2.0);
                check(&[x], |t, v| crate::losses::indistinguishability(t, v[0]))
            }),
        ),
        (
            "recon_loss",
            Box::new(|rng: &mut ChaCha8Rng| {
                let shape = [sz(rng, 1, 3), 1, sz(rng, 1, 4), sz(rng, 1, 4)];
                let a = uniform(rng, &shape, -2.0, 2.0);
                let b = uniform(rng, &shape, -2.0, 2.0);
                check(&[a, b], |t, v| crate::losses::recon_loss(t, v[0], v[1]))
            }),
        ),
    ]
}

fn bn_store(c: usize) -> (ParamStore, crate::params::ParamId, crate::params::ParamId) {
    let mut store = ParamStore::new();
    let rm = store.add("rm", Tensor::zeros(&[c]), false);
    let rv = store.add("rv", Tensor::full(&[c], 1.0), false);
    (store, rm, rv)
}

/// Runs every primitive and loss check on `instances` randomized inputs.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckResult {
            name: name.to_string(),
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn suite_passes_on_a_few_instances() {
        for r in run_suite(5, 3).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{} failed: {}", r.name, r.max_rel_error);
        }
    }
}
