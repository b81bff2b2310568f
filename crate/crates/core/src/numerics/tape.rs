//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the tape once in reverse and returns per-node gradients; parameter
//! gradients are then added into a [`ParamStore`] with
//! [`Tape::accumulate_param_grads`]. Accumulation is additive, so callers zero
//! the store between steps.

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Silu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, xhat: Vec<f64>, inv: Vec<f64> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Gather { table: Var, idx: Vec<usize> },
    ConcatSeq { a: Var, b: Var, batch: usize },
    ReplaceRows { x: Var, fill: Var, mask: Vec<bool> },
    Rope { x: Var, angles: Vec<f64>, seq: usize, heads: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    NchwToRows(Var),
    RowsToNchw(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Dimension,
        "{}: shapes {:?} and {:?} differ",
        what,
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Input tensor; gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    /// Input tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the current value of a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.set_requires_grad(false);
        self.push(t, Op::Param(id), true)
    }

    /// Parameter value used as a constant (no gradient reaches the store).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            Dimension,
            "matmul: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_slices(self.data(a), self.data(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).expect("same shape");
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map_op(a, kernels::silu, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map_op(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.value(a));
        ensure!(
            self.shape(bias) == [n],
            Dimension,
            "bias {:?} does not match last extent {}",
            self.shape(bias),
            n
        );
        let b = self.data(bias);
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(a, bias), ng))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.value(x));
        ensure!(
            self.shape(gain) == [n],
            Dimension,
            "rms_norm gain {:?} does not match last extent {}",
            self.shape(gain),
            n
        );
        let mut out = vec![0.0; self.value(x).len()];
        let inv = kernels::rms_norm_rows(self.data(x), self.data(gain), eps, &mut out);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RmsNorm { x, gain, inv }, ng))
    }

    /// Group normalization of `x [n, c, h, w]` over `c/groups` channels and
    /// all positions, population variance, then per-channel `gain` and `bias`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 4, Dimension, "group_norm expects NCHW, got {:?}", s);
        let c = s[1];
        ensure!(
            groups > 0 && c % groups == 0,
            Dimension,
            "{} channels not divisible into {} groups",
            c,
            groups
        );
        ensure!(
            self.shape(gain) == [c] && self.shape(bias) == [c],
            Dimension,
            "group_norm affine parameters must have {} entries",
            c
        );
        let plane = s[2] * s[3];
        let span = c / groups * plane;
        let xs = self.data(x);
        let (gn, bs) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut inv = Vec::with_capacity(s[0] * groups);
        for (gi, (xg, hg)) in xs.chunks(span).zip(xhat.chunks_mut(span)).enumerate() {
            let mean = xg.iter().sum::<f64>() / span as f64;
            let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv.push(r);
            for (j, (h, v)) in hg.iter_mut().zip(xg).enumerate() {
                *h = (v - mean) * r;
                let ch = (gi % groups) * (c / groups) + j / plane;
                out[gi * span + j] = *h * gn[ch] + bs[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Tensor::new(&s, out)?, Op::GroupNorm { x, gain, bias, groups, xhat, inv }, ng))
    }

    /// `w_down . (silu(x w_gate) * (x w_up))`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate);
        let up = self.matmul(x, w_up)?;
        let h = self.mul(gate, up)?;
        self.matmul(h, w_down)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        ensure!(s.len() == 2, Dimension, "cross entropy expects [rows, classes], got {:?}", s);
        let (rows, k) = (s[0], s[1]);
        ensure!(
            targets.len() == rows,
            Dimension,
            "{} targets for {} rows",
            targets.len(),
            rows
        );
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {t} out of range for {k} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            loss += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / rows.max(1) as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.data(b)), stride, pad)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_transpose_forward(self.value(x), self.value(w), b.map(|b| self.data(b)), stride, pad)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvTranspose { x, w, b, stride, pad }, ng))
    }

    /// Row lookup: `table [v, d]` at `idx` gives `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        ensure!(s.len() == 2, Dimension, "gather_rows expects a 2-D table, got {:?}", s);
        let (v, d) = (s[0], s[1]);
        if let Some(&i) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {i} out of range for table of {v} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::Gather { table, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Per-sequence concatenation: `a [batch*la, d]`, `b [batch*lb, d]` gives
    /// `[batch*(la+lb), d]` with each sequence's `a` rows first.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1] && batch > 0 && sa[0] % batch == 0 && sb[0] % batch == 0,
            Dimension,
            "concat_seq: {:?} and {:?} with batch {}",
            sa,
            sb,
            batch
        );
        let d = sa[1];
        let (la, lb) = (sa[0] / batch, sb[0] / batch);
        let mut out = Vec::with_capacity((sa[0] + sb[0]) * d);
        for i in 0..batch {
            out.extend_from_slice(&self.data(a)[i * la * d..(i + 1) * la * d]);
            out.extend_from_slice(&self.data(b)[i * lb * d..(i + 1) * lb * d]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[sa[0] + sb[0], d], out)?,
            Op::ConcatSeq { a, b, batch },
            ng,
        ))
    }

    /// Rows flagged in `mask` are replaced by the single row `fill [1, d]`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 2 && self.shape(fill) == [1, s[1]] && mask.len() == s[0],
            Dimension,
            "replace_rows: x {:?}, fill {:?}, mask {}",
            s,
            self.shape(fill),
            mask.len()
        );
        let d = s[1];
        let mut out = self.data(x).to_vec();
        let f = self.data(fill).to_vec();
        for (row, &m) in out.chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(&f);
            }
        }
        let ng = self.ng(x) || self.ng(fill);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::ReplaceRows { x, fill, mask: mask.to_vec() },
            ng,
        ))
    }

    /// Rotary embedding on `x [batch*seq, heads*head_dim]`; `angles` is
    /// `[seq, head_dim/2]`, one angle per rotation pair.
    pub fn rope(&mut self, x: Var, angles: &[f64], seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 2 && seq > 0 && s[0] % seq == 0 && heads > 0 && s[1] % heads == 0,
            Dimension,
            "rope: shape {:?} with seq {} heads {}",
            s,
            seq,
            heads
        );
        let hd = s[1] / heads;
        ensure!(
            hd % 2 == 0 && angles.len() == seq * hd / 2,
            Dimension,
            "rope: {} angles for seq {} head_dim {}",
            angles.len(),
            seq,
            hd
        );
        let mut out = self.data(x).to_vec();
        rope_rows(&mut out, angles, seq, heads, hd, false);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::Rope { x, angles: angles.to_vec(), seq, heads },
            ng,
        ))
    }

    /// Causal multi-head attention within each of `batch` sequences.
    /// `q`, `k`, `v` are `[batch*seq, heads*head_dim]` with rotary already applied.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        ensure!(
            self.shape(k) == s.as_slice() && self.shape(v) == s.as_slice(),
            Dimension,
            "attention: q/k/v shapes differ"
        );
        ensure!(
            s.len() == 2 && batch > 0 && s[0] % batch == 0 && heads > 0 && s[1] % heads == 0,
            Dimension,
            "attention: shape {:?} batch {} heads {}",
            s,
            batch,
            heads
        );
        let (t, hd) = (s[0] / batch, s[1] / heads);
        let (out, probs) = attention_forward(self.data(q), self.data(k), self.data(v), batch, t, heads, hd);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::Attention { q, k, v, batch, heads, probs },
            ng,
        ))
    }

    /// Each last-axis row divided by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = last_dim(t);
        let mut out = t.data().to_vec();
        let norms: Vec<f64> = out.chunks_mut(d).map(|r| l2_normalize_row(r, eps)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            Op::L2Normalize { x, norms, eps },
            ng,
        )
    }

    /// Forward value is exactly `z_q`; the gradient passes unchanged to `f`.
    pub fn straight_through(&mut self, f: Var, z_q: Var) -> Result<Var> {
        same_shape(self.value(f), self.value(z_q), "straight_through")?;
        let value = self.value(z_q).clone();
        let ng = self.ng(f);
        Ok(self.push(value, Op::StraightThrough(f), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|v| v * v).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let d = self.sub(a, b)?;
        let s = self.sum_squares(d);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// `[n, c, h, w]` to `[n*h*w, c]` (channels last, raster order).
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 4, Dimension, "nchw_to_rows expects 4-D, got {:?}", s);
        let out = nchw_to_nhwc(self.data(x), s[0], s[1], s[2] * s[3]);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[s[0] * s[2] * s[3], s[1]], out)?,
            Op::NchwToRows(x),
            ng,
        ))
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 2 && s[0] == n * h * w,
            Dimension,
            "rows_to_nchw: {:?} is not [{}*{}*{}, c]",
            s,
            n,
            h,
            w
        );
        let c = s[1];
        let out = nhwc_to_nchw(self.data(x), n, c, h * w);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, Op::RowsToNchw(x), ng))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let t = self.value(x);
        assert_eq!(mask.len(), t.len());
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Dropout { x, mask }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).len() == 1,
            Dimension,
            "backward needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: &[f64]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, contrib),
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, 0.0);
                    acc(*a, &da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, 0.0);
                    acc(*b, &db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(*a, &d);
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
            Op::AddBias(a, bias) => {
                acc(*a, g);
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    add_into(&mut db, row);
                }
                acc(*bias, &db);
            }
            Op::Silu(a) => {
                let d: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| g * kernels::silu_grad(*x)).collect();
                acc(*a, &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, &d);
            }
            Op::LeakyRelu(a, slope) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { slope * g })
                    .collect();
                acc(*a, &d);
            }
            Op::RmsNorm { x, gain, inv } => {
                let gn = self.data(*gain);
                let n = gn.len();
                let xs = self.data(*x);
                let mut dx = vec![0.0; xs.len()];
                let mut dgain = vec![0.0; n];
                for (row, (xr, gr)) in xs.chunks(n).zip(g.chunks(n)).enumerate() {
                    let inv = inv[row];
                    let dot: f64 = (0..n).map(|j| gn[j] * gr[j] * xr[j]).sum();
                    let c = inv * inv * inv * dot / n as f64;
                    for j in 0..n {
                        dx[row * n + j] = inv * gn[j] * gr[j] - c * xr[j];
                        dgain[j] += gr[j] * xr[j] * inv;
                    }
                }
                acc(*x, &dx);
                acc(*gain, &dgain);
            }
            Op::GroupNorm { x, gain, bias, groups, xhat, inv } => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let span = c / groups * plane;
                let gn = self.data(*gain);
                let mut dx = vec![0.0; xhat.len()];
                let (mut dgain, mut dbias) = (vec![0.0; c], vec![0.0; c]);
                for (gi, (hg, gg)) in xhat.chunks(span).zip(g.chunks(span)).enumerate() {
                    let ch0 = (gi % groups) * (c / groups);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for (j, (h, gv)) in hg.iter().zip(gg).enumerate() {
                        let ch = ch0 + j / plane;
                        dgain[ch] += gv * h;
                        dbias[ch] += gv;
                        let d = gv * gn[ch];
                        sum_d += d;
                        sum_dh += d * h;
                    }
                    let k = inv[gi] / span as f64;
                    for (j, (h, gv)) in hg.iter().zip(gg).enumerate() {
                        let d = gv * gn[ch0 + j / plane];
                        dx[gi * span + j] = k * (span as f64 * d - sum_d - h * sum_dh);
                    }
                }
                acc(*x, &dx);
                acc(*gain, &dgain);
                acc(*bias, &dbias);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let rows = targets.len().max(1);
                let k = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= scale;
                }
                acc(*logits, &d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad)?;
                acc(*x, &cg.dx);
                acc(*w, &cg.dw);
                if let Some(b) = b {
                    acc(*b, &cg.db);
                }
            }
            Op::ConvTranspose { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_transpose_backward(self.value(*x), self.value(*w), g, *stride, *pad)?;
                acc(*x, &cg.dx);
                acc(*w, &cg.dw);
                if let Some(b) = b {
                    acc(*b, &cg.db);
                }
            }
            Op::Gather { table, idx } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
                acc(*table, &dt);
            }
            Op::ConcatSeq { a, b, batch } => {
                let d = self.shape(*a)[1];
                let la = self.shape(*a)[0] / batch;
                let lb = self.shape(*b)[0] / batch;
                let mut da = Vec::with_capacity(batch * la * d);
                let mut db = Vec::with_capacity(batch * lb * d);
                for i in 0..*batch {
                    let base = i * (la + lb) * d;
                    da.extend_from_slice(&g[base..base + la * d]);
                    db.extend_from_slice(&g[base + la * d..base + (la + lb) * d]);
                }
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::ReplaceRows { x, fill, mask } => {
                let d = self.shape(*x)[1];
                let mut dx = g.to_vec();
                let mut df = vec![0.0; d];
                for (row, &m) in dx.chunks_mut(d).zip(mask) {
                    if m {
                        add_into(&mut df, row);
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                acc(*x, &dx);
                acc(*fill, &df);
            }
            Op::Rope { x, angles, seq, heads } => {
                let hd = self.shape(*x)[1] / heads;
                let mut d = g.to_vec();
                rope_rows(&mut d, angles, *seq, *heads, hd, true);
                acc(*x, &d);
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                let s = self.shape(*q);
                let (t, hd) = (s[0] / batch, s[1] / heads);
                let (dq, dk, dv) = attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    *batch,
                    t,
                    *heads,
                    hd,
                );
                acc(*q, &dq);
                acc(*k, &dk);
                acc(*v, &dv);
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = node.value.data();
                let d = y.len() / norms.len().max(1);
                let mut dx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    if nrm > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..d {
                            dx[r * d + j] = gr[j] / eps;
                        }
                    }
                }
                acc(*x, &dx);
            }
            Op::StraightThrough(f) => acc(*f, g),
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                acc(*a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let d = vec![g[0] / n as f64; n];
                acc(*a, &d);
            }
            Op::SumSquares(a) => {
                let d: Vec<f64> = self.data(*a).iter().map(|x| 2.0 * x * g[0]).collect();
                acc(*a, &d);
            }
            Op::NchwToRows(x) => {
                let s = self.shape(*x);
                acc(*x, &nhwc_to_nchw(g, s[0], s[1], s[2] * s[3]));
            }
            Op::RowsToNchw(x) => {
                let s = node.value.shape();
                acc(*x, &nchw_to_nhwc(g, s[0], s[1], s[2] * s[3]));
            }
            Op::Dropout { x, mask } => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*x, &d);
            }
        }
        Ok(())
    }
}

/// Normalizes `row` in place, returning its original l2 norm.
pub fn l2_normalize_row(row: &mut [f64], eps: f64) -> f64 {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(eps);
    row.iter_mut().for_each(|v| *v /= denom);
    norm
}

fn nchw_to_nhwc(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                out[(b * plane + p) * c + ch] = x[(b * c + ch) * plane + p];
            }
        }
    }
    out
}

fn nhwc_to_nchw(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                out[(b * c + ch) * plane + p] = x[(b * plane + p) * c + ch];
            }
        }
    }
    out
}

fn rope_rows(x: &mut [f64], angles: &[f64], seq: usize, heads: usize, hd: usize, inverse: bool) {
    let width = heads * hd;
    let half = hd / 2;
    for (r, row) in x.chunks_mut(width).enumerate() {
        let a = &angles[(r % seq) * half..(r % seq + 1) * half];
        for head in row.chunks_mut(hd) {
            kernels::rotate_pairs(head, a, inverse);
        }
    }
}

fn head_block(x: &[f64], b: usize, h: usize, t: usize, heads: usize, hd: usize) -> Vec<f64> {
    let width = heads * hd;
    let mut out = Vec::with_capacity(t * hd);
    for i in 0..t {
        let start = (b * t + i) * width + h * hd;
        out.extend_from_slice(&x[start..start + hd]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], b: usize, h: usize, t: usize, heads: usize, hd: usize) {
    let width = heads * hd;
    for i in 0..t {
        let start = (b * t + i) * width + h * hd;
        add_into(&mut dst[start..start + hd], &src[i * hd..(i + 1) * hd]);
    }
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], batch: usize, t: usize, heads: usize, hd: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; batch * heads * t * t];
    for b in 0..batch {
        for h in 0..heads {
            let (qb, kb, vb) = (
                head_block(q, b, h, t, heads, hd),
                head_block(k, b, h, t, heads, hd),
                head_block(v, b, h, t, heads, hd),
            );
            let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            gemm(t, hd, t, &qb, false, &kb, true, p, 0.0);
            for (i, row) in p.chunks_mut(t).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j > i { f64::NEG_INFINITY } else { *s * scale };
                }
                kernels::softmax_in_place(row);
            }
            let mut o = vec![0.0; t * hd];
            gemm(t, t, hd, p, false, &vb, false, &mut o, 0.0);
            scatter_head(&mut out, &o, b, h, t, heads, hd);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    batch: usize,
    t: usize,
    heads: usize,
    hd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (hd as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
    for b in 0..batch {
        for h in 0..heads {
            let (qb, kb, vb, gb) = (
                head_block(q, b, h, t, heads, hd),
                head_block(k, b, h, t, heads, hd),
                head_block(v, b, h, t, heads, hd),
                head_block(g, b, h, t, heads, hd),
            );
            let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            let mut dvb = vec![0.0; t * hd];
            gemm(t, t, hd, p, true, &gb, false, &mut dvb, 0.0);
            let mut dp = vec![0.0; t * t];
            gemm(t, hd, t, &gb, false, &vb, true, &mut dp, 0.0);
            for (prow, dprow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let mut dqb = vec![0.0; t * hd];
            gemm(t, t, hd, &dp, false, &kb, false, &mut dqb, 0.0);
            let mut dkb = vec![0.0; t * hd];
            gemm(t, t, hd, &dp, true, &qb, false, &mut dkb, 0.0);
            scatter_head(&mut dq, &dqb, b, h, t, heads, hd);
            scatter_head(&mut dk, &dkb, b, h, t, heads, hd);
            scatter_head(&mut dv, &dvb, b, h, t, heads, hd);
        }
    }
    (dq, dk, dv)
}
