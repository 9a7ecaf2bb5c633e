//! Raw numeric kernels over flat row-major buffers. Shapes are validated by
//! the callers in `graph.rs`.

use crate::error::{Error, Result};
use crate::parallel;

/// Examples per work item in the batched convolution kernels. Fixed so the
/// weight-gradient reduction order never depends on the worker count.
const CONV_CHUNK: usize = 4;

pub(crate) fn matmul_dims(
    sa: &[usize],
    sb: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize)> {
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects rank-2 operands, got {sa:?} and {sb:?}"
        )));
    }
    let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
    let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {sa:?}{} x {sb:?}{}",
            if ta { "ᵀ" } else { "" },
            if tb { "ᵀ" } else { "" }
        )));
    }
    Ok((m, ka, n))
}

/// `c = beta * c + op(a) · op(b)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe matrices lying entirely within `a`, `b`
    // and `c`, whose lengths the callers derive from the same extents.
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

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, rsa, csa, b, rsb, csb, 0.0, &mut c);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

/// Output extent of a convolution along one axis, or a shape error when the
/// window does not tile the padded input exactly.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, g: ConvGeom) -> Result<usize> {
    let padded = input + 2 * g.padding;
    if g.stride == 0 {
        return Err(Error::Parameter("convolution stride must be positive".into()));
    }
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(g.stride) {
        return Err(Error::Shape(format!(
            "({padded} - {kernel}) is not divisible by stride {}",
            g.stride
        )));
    }
    Ok((padded - kernel) / g.stride + 1)
}

/// Dimensions shared by the three convolution kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.f * self.p()
    }
}

/// `col[p, (c, i, j)] = x[c, oh*s + i - pad, ow*s + j - pad]`, zero outside.
fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let ckk = d.ckk();
    let s = d.geom.stride as isize;
    let pad = d.geom.padding as isize;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &mut col[(oy * d.ow + ox) * ckk..][..ckk];
            let mut q = 0;
            for c in 0..d.c {
                let plane = &x[c * d.h * d.w..][..d.h * d.w];
                for i in 0..d.kh {
                    let y = oy as isize * s + i as isize - pad;
                    for j in 0..d.kw {
                        let xx = ox as isize * s + j as isize - pad;
                        row[q] = if y >= 0 && (y as usize) < d.h && xx >= 0 && (xx as usize) < d.w {
                            plane[y as usize * d.w + xx as usize]
                        } else {
                            0.0
                        };
                        q += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(col: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let ckk = d.ckk();
    let s = d.geom.stride as isize;
    let pad = d.geom.padding as isize;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let row = &col[(oy * d.ow + ox) * ckk..][..ckk];
            let mut q = 0;
            for c in 0..d.c {
                let plane = &mut dx[c * d.h * d.w..][..d.h * d.w];
                for i in 0..d.kh {
                    let y = oy as isize * s + i as isize - pad;
                    for j in 0..d.kw {
                        let xx = ox as isize * s + j as isize - pad;
                        if y >= 0 && (y as usize) < d.h && xx >= 0 && (xx as usize) < d.w {
                            plane[y as usize * d.w + xx as usize] += row[q];
                        }
                        q += 1;
                    }
                }
            }
        }
    }
}

/// Cross-correlation: `y[n, f] = Σ_c w[f, c] ⋆ x[n, c]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ckk, p, in_len, out_len) = (d.ckk(), d.p(), d.in_len(), d.out_len());
    let mut out = vec![0.0; d.n * out_len];
    parallel::for_each_chunk_mut(&mut out, out_len * CONV_CHUNK, |ci, chunk| {
        let mut col = vec![0.0; p * ckk];
        for (e, y) in chunk.chunks_mut(out_len).enumerate() {
            let ex = ci * CONV_CHUNK + e;
            im2col(&x[ex * in_len..][..in_len], d, &mut col);
            gemm(d.f, ckk, p, w, ckk as isize, 1, &col, 1, ckk as isize, 0.0, y);
        }
    });
    out
}

/// Gradient of [`conv2d`] with respect to its input (a transposed
/// convolution of `g` with `w`).
pub(crate) fn conv2d_back_input(g: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ckk, p, in_len, out_len) = (d.ckk(), d.p(), d.in_len(), d.out_len());
    let mut dx = vec![0.0; d.n * in_len];
    parallel::for_each_chunk_mut(&mut dx, in_len * CONV_CHUNK, |ci, chunk| {
        let mut dcol = vec![0.0; p * ckk];
        for (e, dxe) in chunk.chunks_mut(in_len).enumerate() {
            let ex = ci * CONV_CHUNK + e;
            let ge = &g[ex * out_len..][..out_len];
            gemm(p, d.f, ckk, ge, 1, p as isize, w, ckk as isize, 1, 0.0, &mut dcol);
            col2im(&dcol, d, dxe);
        }
    });
    dx
}

/// Gradient of [`conv2d`] with respect to its weights, summed over the batch.
pub(crate) fn conv2d_back_weight(x: &[f64], g: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ckk, p, in_len, out_len) = (d.ckk(), d.p(), d.in_len(), d.out_len());
    let partials = parallel::map_chunks(d.n, CONV_CHUNK, |range| {
        let mut col = vec![0.0; p * ckk];
        let mut dw = vec![0.0; d.f * ckk];
        for ex in range {
            im2col(&x[ex * in_len..][..in_len], d, &mut col);
            let ge = &g[ex * out_len..][..out_len];
            gemm(d.f, p, ckk, ge, p as isize, 1, &col, ckk as isize, 1, 1.0, &mut dw);
        }
        dw
    });
    let mut total = vec![0.0; d.f * ckk];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Max pooling over `[N, C, H, W]`; trailing rows/columns that do not fill a
/// window are dropped. Returns the pooled values and, for each output, the
/// flat input index of the first maximal element in row-major order.
pub(crate) fn maxpool2d(
    x: &[f64],
    shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("maxpool2d expects [N,C,H,W], got {shape:?}")));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Parameter("pooling window and stride must be positive".into()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pooling window {window} larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut vals = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let k = base + (oy * stride + i) * w + ox * stride + j;
                        if x[k] > best {
                            best = x[k];
                            best_i = k;
                        }
                    }
                }
                vals.push(x[best_i]);
                idx.push(best_i);
            }
        }
    }
    Ok((vec![n, c, oh, ow], vals, idx))
}

/// Row-wise log-softmax over the last axis, stabilized by max subtraction.
pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
