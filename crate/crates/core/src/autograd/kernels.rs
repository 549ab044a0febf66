//! Dense kernels shared by the differentiable ops: GEMM wrappers and the
//! im2col/col2im lowering used by (transposed) convolution.

/// `c = a · b (+ c if accumulate)` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
/// `trans_a`/`trans_b` read the stored matrix as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // Stored a is [m,k] (row stride k) or, when transposed, [k,m] (row stride m).
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides passed in.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 valid convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }
    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }
    pub fn positions(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Lays `x: [N,C,H,W]` out as `cols: [C·k·k, N·Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let npos = g.positions();
    let mut cols = vec![0.0; g.patch_len() * npos];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * npos..(row + 1) * npos];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * l..(n + 1) * l];
                    for y in 0..oh {
                        let s = (y + ki) * g.w + kj;
                        dst[y * ow..(y + 1) * ow].copy_from_slice(&src[s..s + ow]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-sums `cols` back into `[N,C,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let npos = g.positions();
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * npos..(row + 1) * npos];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * l..(n + 1) * l];
                    for y in 0..oh {
                        let d = (y + ki) * g.w + kj;
                        for (o, v) in dst[d..d + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, L]` (sample-major) to `[C, N·L]` (channel-major).
pub(crate) fn nchw_to_cn(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let src = &x[(s * c + ch) * l..(s * c + ch + 1) * l];
            out[ch * n * l + s * l..ch * n * l + (s + 1) * l].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`nchw_to_cn`].
pub(crate) fn cn_to_nchw(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let dst = &mut out[(s * c + ch) * l..(s * c + ch + 1) * l];
            dst.copy_from_slice(&x[ch * n * l + s * l..ch * n * l + (s + 1) * l]);
        }
    }
    out
}
