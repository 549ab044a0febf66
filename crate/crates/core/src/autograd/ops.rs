//! Elementwise, structural and loss primitives, plus the backward dispatch.

use super::{nn, GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a per-sample loss is reduced over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::dim(op, "rank", 2, t.ndim())),
    }
}

/// Row-wise softmax and log-softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; x.len()];
    let mut lp = vec![0.0; x.len()];
    for ((row, prow), lrow) in x.chunks(c).zip(p.chunks_mut(c)).zip(lp.chunks_mut(c)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lz = z.ln();
        for j in 0..c {
            lrow[j] = row[j] - m - lz;
            prow[j] = lrow[j].exp();
        }
    }
    (p, lp)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, "operand numel", self.value(a).numel(), self.value(b).numel()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), out)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.value(a).data().iter().map(|x| f(*x)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let v = self.map(input, |x| x * factor);
        self.push_op(v, Op::Scale { input, factor }, &[input])
    }

    pub fn square(&mut self, input: Var) -> Var {
        let v = self.map(input, |x| x * x);
        self.push_op(v, Op::Square { input }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.map(input, |x| x.max(0.0));
        self.push_op(v, Op::Relu { input }, &[input])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum(input);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar nodes; zero-weight terms are skipped.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::Contract("weighted_sum expects scalar terms".into()));
            }
            if w == 0.0 {
                continue;
            }
            let t = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.input(Tensor::scalar(0.0))))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(input).clone().reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape { input }, &[input]))
    }

    /// Collapses all trailing axes: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    /// Column concatenation `[N,A] ⊕ [N,B] -> [N,A+B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = rows_cols("concat_cols", self.value(a))?;
        let (nb, cb) = rows_cols("concat_cols", self.value(b))?;
        if na != nb {
            return Err(Error::dim("concat_cols", "rows (axis 0)", na, nb));
        }
        let mut out = Vec::with_capacity(na * (ca + cb));
        for i in 0..na {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let v = Tensor::from_parts(vec![na, ca + cb], out);
        Ok(self.push_op(v, Op::Concat { a, b }, &[a, b]))
    }

    /// Rows `alpha·x[first[r]] + (1-alpha)·x[second[r]]`.
    pub fn mix_rows(&mut self, input: Var, first: Vec<usize>, second: Vec<usize>, alpha: f64) -> Result<Var> {
        let (n, c) = rows_cols("mix_rows", self.value(input))?;
        if first.len() != second.len() {
            return Err(Error::dim("mix_rows", "index lists", first.len(), second.len()));
        }
        if let Some(&bad) = first.iter().chain(&second).find(|&&i| i >= n) {
            return Err(Error::dim("mix_rows", "row index", n, bad));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(first.len() * c);
        for (&i, &j) in first.iter().zip(&second) {
            let (ri, rj) = (x.row(i), x.row(j));
            out.extend(ri.iter().zip(rj).map(|(a, b)| alpha * a + (1.0 - alpha) * b));
        }
        let v = Tensor::from_parts(vec![first.len(), c], out);
        Ok(self.push_op(
            v,
            Op::MixRows {
                input,
                first,
                second,
                alpha,
            },
            &[input],
        ))
    }

    /// Rows `x[idx[r]]`.
    pub fn gather_rows(&mut self, input: Var, idx: Vec<usize>) -> Result<Var> {
        let second = idx.clone();
        self.mix_rows(input, idx, second, 1.0)
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, input: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Contract(format!("gradient reversal needs lambda >= 0, got {lambda}")));
        }
        let v = self.value(input).clone();
        Ok(self.push_op(v, Op::GradReverse { input, lambda }, &[input]))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (_, c) = rows_cols("softmax", self.value(input))?;
        let (p, _) = softmax_rows(self.value(input).data(), c);
        let v = Tensor::from_parts(self.shape(input).to_vec(), p);
        Ok(self.push_op(v, Op::Softmax { input }, &[input]))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let (_, c) = rows_cols("log_softmax", self.value(input))?;
        let (_, lp) = softmax_rows(self.value(input).data(), c);
        let v = Tensor::from_parts(self.shape(input).to_vec(), lp);
        Ok(self.push_op(v, Op::LogSoftmax { input }, &[input]))
    }

    /// Cross-entropy of `softmax(logits)` against label-smoothed targets
    /// `q = (1-eps)·onehot + eps/C`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64, reduction: Reduction) -> Result<Var> {
        let (n, c) = rows_cols("cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", "targets", n, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target {bad} out of range for {c} classes")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!("label smoothing {smoothing} not in [0,1)")));
        }
        let (p, lp) = softmax_rows(self.value(logits).data(), c);
        let off = smoothing / c as f64;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lp[i * c..(i + 1) * c];
            let mut li = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let q = off + if j == t { 1.0 - smoothing } else { 0.0 };
                if q > 0.0 {
                    li -= q * l;
                }
            }
            total += li;
        }
        let scale = reduction.scale(n);
        let v = Tensor::scalar(total * scale);
        Ok(self.push_op(
            v,
            Op::CrossEntropy {
                logits,
                probs: p,
                targets: targets.to_vec(),
                smoothing,
                scale,
            },
            &[logits],
        ))
    }

    /// Shannon entropy (nats) of the row posteriors `softmax(logits)`.
    pub fn entropy(&mut self, logits: Var, reduction: Reduction) -> Result<Var> {
        let (n, c) = rows_cols("entropy", self.value(logits))?;
        let (p, lp) = softmax_rows(self.value(logits).data(), c);
        let row_entropy: Vec<f64> = p
            .chunks(c)
            .zip(lp.chunks(c))
            .map(|(pr, lr)| -pr.iter().zip(lr).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let scale = reduction.scale(n);
        let v = Tensor::scalar(row_entropy.iter().sum::<f64>() * scale);
        Ok(self.push_op(
            v,
            Op::Entropy {
                logits,
                probs: p,
                log_probs: lp,
                row_entropy,
                scale,
            },
            &[logits],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        Ok(self.push_op(Tensor::scalar(s / n), Op::Mse { a, b }, &[a, b]))
    }
}

pub(super) fn backward_op(op: &Op, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    if nn::backward_nn(op, g, sink) {
        return;
    }
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::Relu { input } => {
            let dx = sink
                .value(*input)
                .data()
                .iter()
                .zip(g)
                .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                .collect();
            sink.add(*input, dx);
        }
        Op::Reshape { input } => sink.add(*input, g.to_vec()),
        Op::Concat { a, b } => {
            let ca = sink.value(*a).shape()[1];
            let cb = sink.value(*b).shape()[1];
            let (mut da, mut db) = (Vec::new(), Vec::new());
            for row in g.chunks(ca + cb) {
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..]);
            }
            sink.add(*a, da);
            sink.add(*b, db);
        }
        Op::MixRows {
            input,
            first,
            second,
            alpha,
        } => {
            let c = sink.value(*input).shape()[1];
            let mut dx = vec![0.0; sink.value(*input).numel()];
            for (r, (&i, &j)) in first.iter().zip(second).enumerate() {
                let gr = &g[r * c..(r + 1) * c];
                for k in 0..c {
                    dx[i * c + k] += alpha * gr[k];
                }
                if *alpha != 1.0 {
                    for k in 0..c {
                        dx[j * c + k] += (1.0 - alpha) * gr[k];
                    }
                }
            }
            sink.add(*input, dx);
        }
        Op::GradReverse { input, lambda } => sink.add(*input, g.iter().map(|v| -lambda * v).collect()),
        Op::Add { a, b } => {
            sink.add(*a, g.to_vec());
            sink.add(*b, g.to_vec());
        }
        Op::Sub { a, b } => {
            sink.add(*a, g.to_vec());
            sink.add(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            let da = g.iter().zip(sink.value(*b).data()).map(|(x, y)| x * y).collect();
            let db = g.iter().zip(sink.value(*a).data()).map(|(x, y)| x * y).collect();
            sink.add(*a, da);
            sink.add(*b, db);
        }
        Op::Scale { input, factor } => sink.add(*input, g.iter().map(|v| v * factor).collect()),
        Op::Square { input } => {
            let dx = g.iter().zip(sink.value(*input).data()).map(|(gi, x)| 2.0 * x * gi).collect();
            sink.add(*input, dx);
        }
        Op::Sum { input } => {
            let n = sink.value(*input).numel();
            sink.add(*input, vec![g[0]; n]);
        }
        Op::Softmax { input } => {
            let c = out.shape()[1];
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            sink.add(*input, dx);
        }
        Op::LogSoftmax { input } => {
            let c = out.shape()[1];
            let mut dx = vec![0.0; g.len()];
            for ((lr, gr), dr) in out.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                let gs: f64 = gr.iter().sum();
                for j in 0..c {
                    dr[j] = gr[j] - lr[j].exp() * gs;
                }
            }
            sink.add(*input, dx);
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            smoothing,
            scale,
        } => {
            let c = sink.value(*logits).shape()[1];
            let off = smoothing / c as f64;
            let k = g[0] * scale;
            let mut dx = vec![0.0; probs.len()];
            for (i, &t) in targets.iter().enumerate() {
                for j in 0..c {
                    let q = off + if j == t { 1.0 - smoothing } else { 0.0 };
                    dx[i * c + j] = k * (probs[i * c + j] - q);
                }
            }
            sink.add(*logits, dx);
        }
        Op::Entropy {
            logits,
            probs,
            log_probs,
            row_entropy,
            scale,
        } => {
            let c = sink.value(*logits).shape()[1];
            let k = g[0] * scale;
            let mut dx = vec![0.0; probs.len()];
            for (i, h) in row_entropy.iter().enumerate() {
                for j in 0..c {
                    let idx = i * c + j;
                    dx[idx] = -k * probs[idx] * (log_probs[idx] + h);
                }
            }
            sink.add(*logits, dx);
        }
        Op::Mse { a, b } => {
            let n = sink.value(*a).numel() as f64;
            let k = 2.0 * g[0] / n;
            let d: Vec<f64> = sink
                .value(*a)
                .data()
                .iter()
                .zip(sink.value(*b).data())
                .map(|(x, y)| k * (x - y))
                .collect();
            sink.add(*b, d.iter().map(|v| -v).collect());
            sink.add(*a, d);
        }
        Op::Conv2d { .. }
        | Op::ConvTranspose2d { .. }
        | Op::BatchNorm { .. }
        | Op::MaxPool { .. }
        | Op::Upsample2x { .. }
        | Op::Linear { .. } => unreachable!("handled by backward_nn"),
    }
}
