//! Layer primitives: convolution, transposed convolution, batch norm,
//! max pooling, nearest upsampling and affine maps.

use super::kernels::{self, gemm, ConvGeom};
use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, StatUpdate};
use crate::tensor::Tensor;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and queue a running-stat update.
    Train,
    /// Normalize with batch statistics but leave the running stats alone.
    TrainFrozenStats,
    /// Normalize with the stored running statistics.
    Eval,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(op, "rank", 4, t.ndim())),
    }
}

impl Tape {
    /// Stride-1 valid cross-correlation with per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("conv2d", self.value(input))?;
        let [o, wc, k, k2] = dims4("conv2d", self.value(weight))?;
        if wc != c {
            return Err(Error::dim("conv2d", "weight in-channels (axis 1)", c, wc));
        }
        if k != k2 {
            return Err(Error::dim("conv2d", "kernel width (axis 3)", k, k2));
        }
        if k > h {
            return Err(Error::dim("conv2d", "input height (axis 2)", k, h));
        }
        if k > w {
            return Err(Error::dim("conv2d", "input width (axis 3)", k, w));
        }
        if self.value(bias).numel() != o {
            return Err(Error::dim("conv2d", "bias length", o, self.value(bias).numel()));
        }
        let geom = ConvGeom { n, c, h, w, k };
        let cols = kernels::im2col(self.value(input).data(), geom);
        let npos = geom.positions();
        let mut out_cn = vec![0.0; o * npos];
        gemm(o, geom.patch_len(), npos, self.value(weight).data(), false, &cols, false, &mut out_cn, false);
        let l = geom.out_h() * geom.out_w();
        let b = self.value(bias).data();
        for (ch, row) in out_cn.chunks_mut(npos).enumerate() {
            row.iter_mut().for_each(|v| *v += b[ch]);
        }
        let out = kernels::cn_to_nchw(&out_cn, n, o, l);
        let value = Tensor::from_parts(vec![n, o, geom.out_h(), geom.out_w()], out);
        let cols = if self.grad_enabled() { cols } else { Vec::new() };
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// Stride-1 transposed convolution; `weight: [Cin, Cout, k, k]`,
    /// output spatial size `H + k - 1`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("conv_transpose2d", self.value(input))?;
        let [wc, o, k, k2] = dims4("conv_transpose2d", self.value(weight))?;
        if wc != c {
            return Err(Error::dim("conv_transpose2d", "weight in-channels (axis 0)", c, wc));
        }
        if k != k2 {
            return Err(Error::dim("conv_transpose2d", "kernel width (axis 3)", k, k2));
        }
        if self.value(bias).numel() != o {
            return Err(Error::dim("conv_transpose2d", "bias length", o, self.value(bias).numel()));
        }
        // Geometry of the adjoint convolution: its input is our output.
        let geom = ConvGeom {
            n,
            c: o,
            h: h + k - 1,
            w: w + k - 1,
            k,
        };
        let l = h * w;
        let x_cn = kernels::nchw_to_cn(self.value(input).data(), n, c, l);
        let mut cols = vec![0.0; geom.patch_len() * n * l];
        gemm(geom.patch_len(), c, n * l, self.value(weight).data(), true, &x_cn, false, &mut cols, false);
        let mut out = kernels::col2im(&cols, geom);
        let b = self.value(bias).data();
        let plane = geom.h * geom.w;
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let ch = idx % o;
            chunk.iter_mut().for_each(|v| *v += b[ch]);
        }
        let value = Tensor::from_parts(vec![n, o, geom.h, geom.w], out);
        Ok(self.push_op(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// Per-channel batch normalization over `[N,C,H,W]` (or `[N,C]`).
    ///
    /// Batch statistics use the biased variance; the queued running-variance
    /// update uses the unbiased one.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        store: &ParamStore,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, l) = match shape[..] {
            [n, c, h, w] => (n, c, h * w),
            [n, c] => (n, c, 1),
            _ => return Err(Error::dim("batch_norm", "rank", 4, shape.len())),
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(Error::dim("batch_norm", name, c, self.value(v).numel()));
            }
        }
        let m = n * l;
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Eval => (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
                false,
            ),
            BatchNormMode::Train | BatchNormMode::TrainFrozenStats => {
                if m < 2 {
                    return Err(Error::DegenerateBatch { op: "batch_norm", count: m });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for (ch, mc) in mean.iter_mut().enumerate() {
                        let base = (s * c + ch) * l;
                        *mc += x[base..base + l].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        var[ch] += x[base..base + l].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                for i in base..base + l {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        if mode == BatchNormMode::Train {
            let unbiased = m as f64 / (m - 1) as f64;
            self.record_stats(StatUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var: var.iter().map(|v| v * unbiased).collect(),
                momentum: BN_MOMENTUM,
            });
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push_op(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// Max pooling with square window `k` and `stride`; trailing rows/cols
    /// that do not fill a window are dropped. Ties go to the first cell in
    /// row-major order.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("max_pool2d", self.value(input))?;
        if k == 0 || stride == 0 {
            return Err(Error::Contract("max_pool2d window and stride must be positive".into()));
        }
        if h < k {
            return Err(Error::dim("max_pool2d", "input height (axis 2)", k, h));
        }
        if w < k {
            return Err(Error::dim("max_pool2d", "input width (axis 3)", k, w));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push_op(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("upsample2x", self.value(input))?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[plane * oh * ow + y * ow + xx] = x[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push_op(value, Op::Upsample2x { input }, &[input]))
    }

    /// `x · Wᵀ + b` with `x: [N,F]`, `W: [O,F]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = match *self.value(input).shape() {
            [n, f] => (n, f),
            ref s => return Err(Error::dim("linear", "input rank", 2, s.len())),
        };
        let (o, wf) = match *self.value(weight).shape() {
            [o, wf] => (o, wf),
            ref s => return Err(Error::dim("linear", "weight rank", 2, s.len())),
        };
        if wf != f {
            return Err(Error::dim("linear", "input features (axis 1)", wf, f));
        }
        if self.value(bias).numel() != o {
            return Err(Error::dim("linear", "bias length", o, self.value(bias).numel()));
        }
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(n, f, o, self.value(input).data(), false, self.value(weight).data(), true, &mut out, true);
        let value = Tensor::from_parts(vec![n, o], out);
        Ok(self.push_op(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }
}

pub(super) fn backward_nn(op: &Op, g: &[f64], sink: &mut GradSink<'_>) -> bool {
    match op {
        Op::Conv2d {
            input,
            weight,
            bias,
            cols,
            geom,
        } => {
            let o = sink.value(*weight).shape()[0];
            let l = geom.out_h() * geom.out_w();
            let npos = geom.positions();
            let g_cn = kernels::nchw_to_cn(g, geom.n, o, l);
            if sink.wants(*bias) {
                let db = g_cn.chunks(npos).map(|r| r.iter().sum()).collect();
                sink.add(*bias, db);
            }
            if sink.wants(*weight) {
                let mut dw = vec![0.0; o * geom.patch_len()];
                gemm(o, npos, geom.patch_len(), &g_cn, false, cols, true, &mut dw, false);
                sink.add(*weight, dw);
            }
            if sink.wants(*input) {
                let mut dcols = vec![0.0; geom.patch_len() * npos];
                gemm(geom.patch_len(), o, npos, sink.value(*weight).data(), true, &g_cn, false, &mut dcols, false);
                sink.add(*input, kernels::col2im(&dcols, *geom));
            }
            true
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let c = sink.value(*input).shape()[1];
            let n = geom.n;
            let l = geom.out_h() * geom.out_w();
            let o = geom.c;
            if sink.wants(*bias) {
                let plane = geom.h * geom.w;
                let mut db = vec![0.0; o];
                for (idx, chunk) in g.chunks(plane).enumerate() {
                    db[idx % o] += chunk.iter().sum::<f64>();
                }
                sink.add(*bias, db);
            }
            let gcols = kernels::im2col(g, *geom);
            if sink.wants(*weight) {
                let x_cn = kernels::nchw_to_cn(sink.value(*input).data(), n, c, l);
                let mut dw = vec![0.0; c * geom.patch_len()];
                gemm(c, n * l, geom.patch_len(), &x_cn, false, &gcols, true, &mut dw, false);
                sink.add(*weight, dw);
            }
            if sink.wants(*input) {
                let mut dx_cn = vec![0.0; c * n * l];
                gemm(c, geom.patch_len(), n * l, sink.value(*weight).data(), false, &gcols, false, &mut dx_cn, false);
                sink.add(*input, kernels::cn_to_nchw(&dx_cn, n, c, l));
            }
            true
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = sink.value(*input).shape().to_vec();
            let (n, c) = (shape[0], shape[1]);
            let l: usize = shape[2..].iter().product();
            let m = (n * l) as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * l;
                    for i in base..base + l {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if sink.wants(*gamma) {
                sink.add(*gamma, sum_gx.clone());
            }
            if sink.wants(*beta) {
                sink.add(*beta, sum_g.clone());
            }
            if sink.wants(*input) {
                let gam = sink.value(*gamma).data().to_vec();
                let mut dx = vec![0.0; g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + l {
                            dx[i] = if *batch_stats {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                sink.add(*input, dx);
            }
            true
        }
        Op::MaxPool { input, argmax } => {
            let mut dx = vec![0.0; sink.value(*input).numel()];
            for (gi, &src) in g.iter().zip(argmax) {
                dx[src] += gi;
            }
            sink.add(*input, dx);
            true
        }
        Op::Upsample2x { input } => {
            let shape = sink.value(*input).shape().to_vec();
            let (h, w) = (shape[2], shape[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut dx = vec![0.0; sink.value(*input).numel()];
            for plane in 0..shape[0] * shape[1] {
                for y in 0..oh {
                    for x in 0..ow {
                        dx[plane * h * w + (y / 2) * w + x / 2] += g[plane * oh * ow + y * ow + x];
                    }
                }
            }
            sink.add(*input, dx);
            true
        }
        Op::Linear { input, weight, bias } => {
            let (n, f) = (sink.value(*input).shape()[0], sink.value(*input).shape()[1]);
            let o = sink.value(*weight).shape()[0];
            if sink.wants(*bias) {
                let mut db = vec![0.0; o];
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                sink.add(*bias, db);
            }
            if sink.wants(*weight) {
                let mut dw = vec![0.0; o * f];
                gemm(o, n, f, g, true, sink.value(*input).data(), false, &mut dw, false);
                sink.add(*weight, dw);
            }
            if sink.wants(*input) {
                let mut dx = vec![0.0; n * f];
                gemm(n, o, f, g, false, sink.value(*weight).data(), false, &mut dx, false);
                sink.add(*input, dx);
            }
            true
        }
        _ => false,
    }
}
