//! Slice-level kernels shared by the tape and the inference paths.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `trans_a` means `a` is stored `k x m`; `trans_b` means `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: extents checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a [m,k] x b [k,n]`.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut c, 0.0);
    c
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place softmax of one row; `-inf` entries get probability zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// RMS normalization of each `width`-wide row; returns `1/rms` per row.
pub fn rms_norm_rows(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> Vec<f64> {
    let width = gain.len();
    x.chunks(width)
        .zip(out.chunks_mut(width))
        .map(|(xr, or)| {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / width as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, v), g) in or.iter_mut().zip(xr).zip(gain) {
                *o = v * inv * g;
            }
            inv
        })
        .collect()
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `angles[i]`.
pub fn rotate_pairs(x: &mut [f64], angles: &[f64], inverse: bool) {
    for (pair, &theta) in x.chunks_exact_mut(2).zip(angles) {
        if theta == 0.0 {
            continue;
        }
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Output extent of a strided, padded window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    ensure!(stride >= 1, Dimension, "stride must be >= 1");
    ensure!(
        input + 2 * pad >= kernel,
        Dimension,
        "kernel {} larger than padded input {}",
        kernel,
        input + 2 * pad
    );
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Geometry of a forward convolution from `c x h x w` to `oh x ow`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let oh = conv_out_extent(h, kh, stride, pad)?;
        let ow = conv_out_extent(w, kw, stride, pad)?;
        Ok(Self { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_row, col_col, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.col_cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            f(
                                r * cols + oy * self.ow + ox,
                                (c * self.h + y as usize) * self.w + x as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.col_rows() * self.col_cols()];
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
        cols
    }

    /// Scatter-adds columns back onto an image buffer.
    pub fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        self.for_each_tap(|ci, xi| x[xi] += cols[ci]);
    }
}

fn check_4d(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    ensure!(t.rank() == 4, Dimension, "{} must be 4-D, got {:?}", what, t.shape());
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// Cross-correlation of NCHW `x` with OIHW `w`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, ci, h, wd] = check_4d(x, "conv2d input")?;
    let [co, wci, kh, kw] = check_4d(w, "conv2d kernel")?;
    ensure!(ci == wci, Dimension, "conv2d: input has {} channels, kernel expects {}", ci, wci);
    if let Some(b) = bias {
        ensure!(b.len() == co, Dimension, "conv2d bias length {} != {}", b.len(), co);
    }
    let g = ConvGeom::new(ci, h, wd, kh, kw, stride, pad)?;
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; n * co * plane];
    let in_sz = ci * h * wd;
    out.par_chunks_mut(co * plane).enumerate().for_each(|(b, o)| {
        let cols = g.im2col(&x.data()[b * in_sz..(b + 1) * in_sz]);
        gemm(co, g.col_rows(), plane, w.data(), false, &cols, false, o, 0.0);
        if let Some(bias) = bias {
            for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
    });
    Tensor::new(&[n, co, g.oh, g.ow], out)
}

pub struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, grad_out: &[f64], stride: usize, pad: usize) -> Result<ConvGrads> {
    let [n, ci, h, wd] = check_4d(x, "conv2d input")?;
    let [co, _, kh, kw] = check_4d(w, "conv2d kernel")?;
    let g = ConvGeom::new(ci, h, wd, kh, kw, stride, pad)?;
    let plane = g.oh * g.ow;
    let in_sz = ci * h * wd;
    let kr = g.col_rows();
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let go = &grad_out[b * co * plane..(b + 1) * co * plane];
            let cols = g.im2col(&x.data()[b * in_sz..(b + 1) * in_sz]);
            let mut dw = vec![0.0; co * kr];
            gemm(co, plane, kr, go, false, &cols, true, &mut dw, 0.0);
            let mut dcols = vec![0.0; kr * plane];
            gemm(kr, co, plane, w.data(), true, go, false, &mut dcols, 0.0);
            let mut dx = vec![0.0; in_sz];
            g.col2im(&dcols, &mut dx);
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(n * in_sz);
    let mut dw = vec![0.0; co * kr];
    for (dxi, dwi) in per_image {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; co];
    for b in 0..n {
        for (oc, d) in db.iter_mut().enumerate() {
            let start = (b * co + oc) * plane;
            *d += grad_out[start..start + plane].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Geometry of the conv whose adjoint maps `x [n, co, h, w]` to the output.
fn transpose_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let [n, c_in, h, wd] = check_4d(x, "conv2d_transpose input")?;
    let [wco, c_out, kh, kw] = check_4d(w, "conv2d_transpose kernel")?;
    ensure!(
        c_in == wco,
        Dimension,
        "conv2d_transpose: input has {} channels, kernel expects {}",
        c_in,
        wco
    );
    ensure!(stride >= 1, Dimension, "stride must be >= 1");
    let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
    let ow = ((wd - 1) * stride + kw) as isize - 2 * pad as isize;
    ensure!(
        oh >= 1 && ow >= 1,
        Dimension,
        "conv2d_transpose: kernel {}x{} with pad {} gives empty output",
        kh,
        kw,
        pad
    );
    let g = ConvGeom::new(c_out, oh as usize, ow as usize, kh, kw, stride, pad)?;
    ensure!(
        g.oh == h && g.ow == wd,
        Dimension,
        "conv2d_transpose geometry mismatch"
    );
    Ok((n, c_in, g))
}

/// Adjoint of [`conv2d_forward`]: `w` is the OIHW kernel of the forward conv.
pub fn conv2d_transpose_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c_in, g) = transpose_geom(x, w, stride, pad)?;
    let c_out = g.c;
    if let Some(b) = bias {
        ensure!(b.len() == c_out, Dimension, "conv2d_transpose bias length {} != {}", b.len(), c_out);
    }
    let plane_in = g.oh * g.ow;
    let out_sz = c_out * g.h * g.w;
    let kr = g.col_rows();
    let mut out = vec![0.0; n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(b, o)| {
        let xb = &x.data()[b * c_in * plane_in..(b + 1) * c_in * plane_in];
        let mut cols = vec![0.0; kr * plane_in];
        gemm(kr, c_in, plane_in, w.data(), true, xb, false, &mut cols, 0.0);
        g.col2im(&cols, o);
        if let Some(bias) = bias {
            for (oc, chunk) in o.chunks_mut(g.h * g.w).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
    });
    Tensor::new(&[n, c_out, g.h, g.w], out)
}

pub fn conv2d_transpose_backward(x: &Tensor, w: &Tensor, grad_out: &[f64], stride: usize, pad: usize) -> Result<ConvGrads> {
    let (n, c_in, g) = transpose_geom(x, w, stride, pad)?;
    let c_out = g.c;
    let plane_in = g.oh * g.ow;
    let out_sz = c_out * g.h * g.w;
    let kr = g.col_rows();
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * c_in * plane_in..(b + 1) * c_in * plane_in];
            let dcols = g.im2col(&grad_out[b * out_sz..(b + 1) * out_sz]);
            let mut dx = vec![0.0; c_in * plane_in];
            gemm(c_in, kr, plane_in, w.data(), false, &dcols, false, &mut dx, 0.0);
            let mut dw = vec![0.0; c_in * kr];
            gemm(c_in, plane_in, kr, xb, false, &dcols, true, &mut dw, 0.0);
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; w.len()];
    for (dxi, dwi) in per_image {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
    }
    let plane_out = g.h * g.w;
    let mut db = vec![0.0; c_out];
    for b in 0..n {
        for (oc, d) in db.iter_mut().enumerate() {
            let start = (b * c_out + oc) * plane_out;
            *d += grad_out[start..start + plane_out].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
