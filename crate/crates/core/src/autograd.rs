//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse and adds the resulting gradients into each
//! node's gradient buffer, so calling it twice without [`Graph::zero_grad`]
//! doubles every gradient.
//!
//! Binary elementwise ops broadcast numpy-style (shapes aligned from the
//! right, size-1 or missing axes stretched).

use std::cell::{Ref, RefCell};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule to sabotage, for negative-control gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    Sigmoid,
    Gelu,
    Softmax,
    MatMul,
    LayerNorm,
    Im2Col,
    PlaneConv,
}

const FAULT_SCALE: f64 = 1.5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    L2Normalize { x: Var, eps: f64 },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Im2Col { x: Var, kh: usize, kw: usize, stride: usize, pad: (usize, usize) },
    PlaneConv { x: Var, k: Var, kh: usize, kw: usize },
    KlRows { p: Var, q: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Probability floor inside the KL logarithms.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    fault: Option<GradFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward pass deliberately miscomputes one rule.
    pub fn with_fault(fault: GradFault) -> Self {
        Self { nodes: RefCell::default(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A leaf that may receive gradient.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input (never receives gradient).
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut from the tape.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(Var, Var) -> Op) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let mut data = vec![0.0; numel(&shape)];
            let (da, db) = (ta.data(), tb.data());
            if ta.shape() == tb.shape() {
                for ((o, &x), &y) in data.iter_mut().zip(da).zip(db) {
                    *o = f(x, y);
                }
            } else {
                let sa = bcast_strides(ta.shape(), &shape);
                let sb = bcast_strides(tb.shape(), &shape);
                for_each_bcast(&shape, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
            }
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, op(a, b), self.rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[.., m, k] · b[k, n]` or batched `a[.., m, k] · b[.., k, n]` with equal leading axes.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, op) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return dim_err(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != k2 {
                return dim_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
            }
            let lead = &sa[..sa.len() - 2];
            let batch = numel(lead);
            let b_batched = sb.len() > 2;
            if b_batched && &sb[..sb.len() - 2] != lead {
                return dim_err(format!("matmul batch axes differ: {sa:?} x {sb:?}"));
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            let mut data = vec![0.0; batch * m * n];
            for g in 0..batch {
                let ao = &ta.data()[g * m * k..(g + 1) * m * k];
                let bo = if b_batched { &tb.data()[g * k * n..(g + 1) * k * n] } else { tb.data() };
                gemm(m, k, n, ao, k, 1, bo, n, 1, &mut data[g * m * n..(g + 1) * m * n], 0.0);
            }
            (Tensor::new(shape, data)?, Op::MatMul { a, b, batch, m, k, n, b_batched })
        };
        Ok(self.push(out, op, self.rg(&[a, b])))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let mut seen = vec![false; t.rank()];
            if axes.len() != t.rank() || axes.iter().any(|&a| a >= t.rank() || std::mem::replace(&mut seen[a], true)) {
                return dim_err(format!("invalid permutation {axes:?} for shape {:?}", t.shape()));
            }
            permute_tensor(&t, axes)
        };
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, self.rg(&[x])))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), self.rg(&[x])))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let t = self.value(x);
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let n = last_dim(t.shape())?;
            let data = t.data().chunks(n).map(|r| r.iter().sum()).collect();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::SumLast(x), self.rg(&[x])))
    }

    pub fn mean_last(&self, x: Var) -> Result<Var> {
        let n = last_dim(&self.shape(x))?;
        let s = self.sum_last(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---- row-wise ops over the last axis -----------------------------

    pub fn softmax_last(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let n = last_dim(t.shape())?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::SoftmaxLast(x), self.rg(&[x])))
    }

    pub fn log_softmax_last(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let n = last_dim(t.shape())?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::LogSoftmaxLast(x), self.rg(&[x])))
    }

    /// Row softmax of `x / temperature`.
    pub fn softmax_rows(&self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        self.softmax_last(self.scale(x, 1.0 / temperature))
    }

    /// `x / sqrt(sum(x^2) + eps)` per row.
    pub fn l2_normalize(&self, x: Var, eps: f64) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let n = last_dim(t.shape())?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                if norm == 0.0 {
                    return Err(Error::Domain("l2_normalize of an exact zero row with eps = 0".into()));
                }
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::L2Normalize { x, eps }, self.rg(&[x])))
    }

    /// Zero-mean, unit-variance per row (no affine part).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let (out, rstd) = {
            let t = self.value(x);
            let n = last_dim(t.shape())?;
            let mut data = t.data().to_vec();
            let mut rstd = Vec::with_capacity(data.len() / n);
            for row in data.chunks_mut(n) {
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mu) * r);
                rstd.push(r);
            }
            (Tensor::new(t.shape().to_vec(), data)?, rstd)
        };
        Ok(self.push(out, Op::LayerNorm { x, rstd }, self.rg(&[x])))
    }

    // ---- structural --------------------------------------------------

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = match xs.first() {
                Some(v) => nodes[v.0].value.shape().to_vec(),
                None => return dim_err("concat of zero tensors"),
            };
            if axis >= first.len() {
                return dim_err(format!("concat axis {axis} out of range for {first:?}"));
            }
            let mut total = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                if s.len() != first.len()
                    || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
                {
                    return dim_err(format!("concat along axis {axis}: {first:?} vs {s:?}"));
                }
                total += s[axis];
            }
            let outer = numel(&first[..axis]);
            let inner = numel(&first[axis + 1..]);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, self.rg(xs)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let s = t.shape();
            if axis >= s.len() || start + len > s[axis] {
                return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {s:?}"));
            }
            let outer = numel(&s[..axis]);
            let inner = numel(&s[axis + 1..]);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[axis] + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Narrow { x, axis, start }, self.rg(&[x])))
    }

    /// Unfolds `[B, C, H, W]` into `[B, Ho*Wo, C*kh*kw]` sliding windows with
    /// `pad = (rows, cols)` of zero padding.
    pub fn im2col(&self, x: Var, (kh, kw): (usize, usize), stride: usize, pad: (usize, usize)) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let s = t.shape();
            if s.len() != 4 {
                return dim_err(format!("im2col expects [B, C, H, W], got {s:?}"));
            }
            if stride == 0 || kh == 0 || kw == 0 {
                return Err(Error::Config("im2col needs positive kernel and stride".into()));
            }
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
                return dim_err(format!("kernel {kh}x{kw} larger than padded input {s:?}"));
            }
            let ho = (h + 2 * pad.0 - kh) / stride + 1;
            let wo = (w + 2 * pad.1 - kw) / stride + 1;
            let cols = c * kh * kw;
            let mut data = vec![0.0; b * ho * wo * cols];
            im2col_visit(b, c, h, w, kh, kw, stride, pad, |src, dst| data[dst] = t.data()[src]);
            Tensor::new([b, ho * wo, cols], data)?
        };
        Ok(self.push(out, Op::Im2Col { x, kh, kw, stride, pad }, self.rg(&[x])))
    }

    /// Cross-correlates every plane of `x: [P, H, W]` with its own kernel
    /// `k: [P, kh*kw]` (odd sizes, zero "same" padding).
    pub fn plane_conv(&self, x: Var, k: Var, (kh, kw): (usize, usize)) -> Result<Var> {
        let out = {
            let (tx, tk) = (self.value(x), self.value(k));
            let (sx, sk) = (tx.shape(), tk.shape());
            if sx.len() != 3 || sk != [sx[0], kh * kw] {
                return dim_err(format!("plane_conv expects [P, H, W] and [P, {}], got {sx:?} and {sk:?}", kh * kw));
            }
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::Config(format!("plane_conv needs odd kernels, got {kh}x{kw}")));
            }
            let mut data = vec![0.0; tx.data().len()];
            plane_conv_visit(sx, (kh, kw), |xi, ki, oi| data[oi] += tk.data()[ki] * tx.data()[xi]);
            Tensor::new(sx.to_vec(), data)?
        };
        Ok(self.push(out, Op::PlaneConv { x, k, kh, kw }, self.rg(&[x, k])))
    }

    /// Mean over rows of `sum_j p log(p / q)`, with `0 log 0 = 0` and both
    /// arguments floored at [`KL_EPS`] inside the logarithm.
    pub fn kl_rows(&self, p: Var, q: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tp, tq) = (&nodes[p.0].value, &nodes[q.0].value);
            if tp.shape() != tq.shape() {
                return dim_err(format!("kl_rows shapes differ: {:?} vs {:?}", tp.shape(), tq.shape()));
            }
            let n = last_dim(tp.shape())?;
            let rows = tp.numel() / n;
            let s: f64 = tp.data().iter().zip(tq.data()).map(|(&a, &b)| kl_term(a, b)).sum();
            Tensor::scalar(s / rows as f64)
        };
        Ok(self.push(out, Op::KlRows { p, q }, self.rg(&[p, q])))
    }

    // ---- backward ----------------------------------------------------

    /// Adds d(loss)/d(node) into every node that requires gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            self.backward_node(&nodes, id, &g, &mut grads);
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn backward_node(&self, nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &nodes[id];
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let fault = |f: GradFault| if self.fault == Some(f) { FAULT_SCALE } else { 1.0 };
        let y = node.value.data();

        // Accumulates `contrib` into the pending gradient of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = node.value.shape();
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !rg(v) {
                        continue;
                    }
                    let shp = val(v).shape().to_vec();
                    acc(grads, v, numel(&shp), |buf| {
                        if shp == out_shape {
                            buf.iter_mut().zip(g).for_each(|(o, gi)| *o += s * gi);
                        } else {
                            let sv = bcast_strides(&shp, out_shape);
                            for_each_bcast(out_shape, &sv, &sv, |i, iv, _| buf[iv] += s * g[i]);
                        }
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let out_shape = node.value.shape();
                let (ta, tb) = (val(*a), val(*b));
                let sa = bcast_strides(ta.shape(), out_shape);
                let sb = bcast_strides(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                if rg(*a) {
                    acc(grads, *a, da.len(), |buf| {
                        for_each_bcast(out_shape, &sa, &sb, |i, ia, ib| {
                            buf[ia] += if is_div { g[i] / db[ib] } else { g[i] * db[ib] };
                        })
                    });
                }
                if rg(*b) {
                    acc(grads, *b, db.len(), |buf| {
                        for_each_bcast(out_shape, &sa, &sb, |i, ia, ib| {
                            buf[ib] += if is_div { -g[i] * da[ia] / (db[ib] * db[ib]) } else { g[i] * da[ia] };
                        })
                    });
                }
            }
            Op::Scale(x, c) => acc(grads, *x, g.len(), |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(grads, *x, g.len(), |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi))
            }
            Op::Exp(x) => acc(grads, *x, g.len(), |buf| {
                buf.iter_mut().zip(g).zip(y).for_each(|((o, gi), yi)| *o += gi * yi)
            }),
            Op::Sigmoid(x) => {
                let f = fault(GradFault::Sigmoid);
                acc(grads, *x, g.len(), |buf| {
                    buf.iter_mut().zip(g).zip(y).for_each(|((o, gi), yi)| *o += f * gi * yi * (1.0 - yi))
                })
            }
            Op::Gelu(x) => {
                let f = fault(GradFault::Gelu);
                let xs = val(*x).data();
                acc(grads, *x, g.len(), |buf| {
                    buf.iter_mut().zip(g).zip(xs).for_each(|((o, gi), &xi)| *o += f * gi * gelu_grad(xi))
                })
            }
            Op::MatMul { a, b, batch, m, k, n, b_batched } => {
                let (m, k, n) = (*m, *k, *n);
                let f = fault(GradFault::MatMul);
                let (da, db) = (val(*a).data(), val(*b).data());
                let gs: Vec<f64>;
                let g = if f != 1.0 {
                    gs = g.iter().map(|v| v * f).collect();
                    &gs[..]
                } else {
                    g
                };
                if rg(*a) {
                    acc(grads, *a, da.len(), |buf| {
                        for bi in 0..*batch {
                            let go = &g[bi * m * n..(bi + 1) * m * n];
                            let bo = if *b_batched { &db[bi * k * n..(bi + 1) * k * n] } else { db };
                            // dA = dC · Bᵀ
                            gemm(m, n, k, go, n, 1, bo, 1, n, &mut buf[bi * m * k..(bi + 1) * m * k], 1.0);
                        }
                    });
                }
                if rg(*b) {
                    acc(grads, *b, db.len(), |buf| {
                        for bi in 0..*batch {
                            let go = &g[bi * m * n..(bi + 1) * m * n];
                            let ao = &da[bi * m * k..(bi + 1) * m * k];
                            let dst = if *b_batched { &mut buf[bi * k * n..(bi + 1) * k * n] } else { &mut buf[..] };
                            // dB = Aᵀ · dC
                            gemm(k, m, n, ao, 1, k, go, n, 1, dst, 1.0);
                        }
                    });
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap();
                let back = permute_tensor(&gt, &inv);
                acc(grads, *x, g.len(), |buf| buf.iter_mut().zip(back.data()).for_each(|(o, gi)| *o += gi));
            }
            Op::Sum(x) => acc(grads, *x, val(*x).numel(), |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(grads, *x, n, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n as f64))
            }
            Op::SumLast(x) => {
                let xt = val(*x);
                let n = *xt.shape().last().unwrap();
                acc(grads, *x, xt.numel(), |buf| {
                    for (r, row) in buf.chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|o| *o += g[r]);
                    }
                })
            }
            Op::SoftmaxLast(x) => {
                let f = fault(GradFault::Softmax);
                let n = *node.value.shape().last().unwrap();
                acc(grads, *x, g.len(), |buf| {
                    for ((b, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *o += f * yi * (gi - dot);
                        }
                    }
                })
            }
            Op::LogSoftmaxLast(x) => {
                let f = fault(GradFault::Softmax);
                let n = *node.value.shape().last().unwrap();
                acc(grads, *x, g.len(), |buf| {
                    for ((b, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((o, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *o += f * (gi - yi.exp() * gsum);
                        }
                    }
                })
            }
            Op::L2Normalize { x, eps } => {
                let xs = val(*x).data();
                let n = *node.value.shape().last().unwrap();
                acc(grads, *x, g.len(), |buf| {
                    for (((b, gr), yr), xr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(xs.chunks(n)) {
                        let norm = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * dot) / norm;
                        }
                    }
                })
            }
            Op::LayerNorm { x, rstd } => {
                let f = fault(GradFault::LayerNorm);
                let n = *node.value.shape().last().unwrap();
                acc(grads, *x, g.len(), |buf| {
                    for (((b, gr), yr), r) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(rstd) {
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *o += f * r * (gi - gm - yi * gym);
                        }
                    }
                })
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut off = 0;
                for v in xs {
                    let len = val(*v).shape()[*axis] * inner;
                    if rg(*v) {
                        acc(grads, *v, outer * len, |buf| {
                            for o in 0..outer {
                                let src = &g[o * total + off..o * total + off + len];
                                buf[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        });
                    }
                    off += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = val(*x).shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = node.value.shape()[*axis];
                acc(grads, *x, numel(s), |buf| {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        buf[base..base + len * inner].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                })
            }
            Op::Im2Col { x, kh, kw, stride, pad } => {
                let f = fault(GradFault::Im2Col);
                let s = val(*x).shape();
                acc(grads, *x, numel(s), |buf| {
                    im2col_visit(s[0], s[1], s[2], s[3], *kh, *kw, *stride, *pad, |src, dst| buf[src] += f * g[dst])
                })
            }
            Op::PlaneConv { x, k, kh, kw } => {
                let f = fault(GradFault::PlaneConv);
                let (tx, tk) = (val(*x), val(*k));
                let (dx, dk) = (tx.data(), tk.data());
                if rg(*x) {
                    acc(grads, *x, dx.len(), |buf| {
                        plane_conv_visit(tx.shape(), (*kh, *kw), |xi, ki, oi| buf[xi] += f * dk[ki] * g[oi])
                    });
                }
                if rg(*k) {
                    acc(grads, *k, dk.len(), |buf| {
                        plane_conv_visit(tx.shape(), (*kh, *kw), |xi, ki, oi| buf[ki] += dx[xi] * g[oi])
                    });
                }
            }
            Op::KlRows { p, q } => {
                let (dp, dq) = (val(*p).data(), val(*q).data());
                let n = *val(*p).shape().last().unwrap();
                let scale = g[0] / (dp.len() / n) as f64;
                if rg(*p) {
                    acc(grads, *p, dp.len(), |buf| {
                        for ((o, &a), &b) in buf.iter_mut().zip(dp).zip(dq) {
                            if a > 0.0 {
                                let own = if a > KL_EPS { 1.0 } else { 0.0 };
                                *o += scale * (a.max(KL_EPS).ln() - b.max(KL_EPS).ln() + own);
                            }
                        }
                    });
                }
                if rg(*q) {
                    acc(grads, *q, dq.len(), |buf| {
                        for ((o, &a), &b) in buf.iter_mut().zip(dp).zip(dq) {
                            if a > 0.0 && b > KL_EPS {
                                *o -= scale * a / b;
                            }
                        }
                    });
                }
            }
        }
    }
}

// ---- numeric kernels -------------------------------------------------

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn kl_term(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p.max(KL_EPS).ln() - q.max(KL_EPS).ln())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => dim_err(format!("row-wise op needs a non-empty last axis, got {shape:?}")),
    }
}

/// `c = a·b + beta·c` for strided `a` (m×k) and `b` (k×n), row-major `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index dgemm touches within each slice.
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

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out`, zero on broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let lead = r - shape.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        let mut d = r - 1;
        loop {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] || d == 0 {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
            d -= 1;
        }
    }
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let s = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let mut in_strides = vec![0; s.len()];
    let mut acc = 1;
    for i in (0..s.len()).rev() {
        in_strides[i] = acc;
        acc *= s[i];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(t.numel());
    let src = t.data();
    for_each_bcast(&out_shape, &strides, &strides, |_, off, _| data.push(src[off]));
    Tensor::new(out_shape, data).unwrap()
}

/// Calls `f(src_offset, dst_offset)` for every in-bounds tap of the unfold.
#[allow(clippy::too_many_arguments)]
/// Calls `f(x_index, kernel_index, out_index)` for every in-bounds tap.
/// Bounds are resolved per kernel row and column so the inner loop is a
/// plain strided run.
#[inline]
fn plane_conv_visit(shape: &[usize], (kh, kw): (usize, usize), mut f: impl FnMut(usize, usize, usize)) {
    let (p, h, w) = (shape[0], shape[1], shape[2]);
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    for pi in 0..p {
        let plane = pi * h * w;
        for ky in 0..kh {
            let dy = ky as isize - ch;
            let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize).max(0) as usize);
            for kx in 0..kw {
                let dx = kx as isize - cw;
                let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize).max(0) as usize);
                let ki = pi * kh * kw + ky * kw + kx;
                for y in y0..y1 {
                    let orow = plane + y * w;
                    let irow = plane + (y as isize + dy) as usize * w;
                    for xx in x0..x1 {
                        f(irow + (xx as isize + dx) as usize, ki, orow + xx);
                    }
                }
            }
        }
    }
}

fn im2col_visit(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    (ph, pw): (usize, usize),
    mut f: impl FnMut(usize, usize),
) {
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (w + 2 * pw - kw) / stride + 1;
    let cols = c * kh * kw;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho * wo + oy * wo + ox) * cols;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                            f(src, row + (ci * kh + ky) * kw + kx);
                        }
                    }
                }
            }
        }
    }
}
