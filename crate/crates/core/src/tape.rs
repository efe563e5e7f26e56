//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. `backward` walks the nodes in reverse execution order and
//! accumulates gradients into every node that depends on a `requires_grad` leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) fn var_from_index(i: usize) -> Var {
    Var(i)
}

/// Row source for [`Tape::gather_rows`]: `(source slot, row within source)`.
pub type RowRef = (u32, u32);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<f64> },
    Gather { sources: Vec<Var>, index: Vec<RowRef> },
    Reshape(Var),
    L2NormalizeRows { x: Var, inv_norm: Vec<f64> },
    SumRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Reparam { mu: Var, log_var: Var, eps: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    KlDiag { mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var },
    Sum(Var),
    Mean(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Single-owner record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    let n = numel(shape);
    (n.checked_div(c).unwrap_or(0), c)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major `a[m×k] · b[k×n]` into `out[m×n]` (overwritten).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, op_name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        #[cfg(debug_assertions)]
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let _ = op_name;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::Reshape(x)
            | Op::SumRows(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { sources, .. } => sources.clone(),
            Op::L2NormalizeRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Reparam { mu, log_var, .. } => vec![*mu, *log_var],
            Op::Clamp { x, .. } => vec![*x],
            Op::KlDiag { mu_q, lv_q, mu_p, lv_p } => vec![*mu_q, *lv_q, *mu_p, *lv_p],
        }
    }

    /// Records a leaf; gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a constant leaf from raw parts.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(dim_err("constant", shape, &[data.len()]));
        }
        self.push(shape.to_vec(), data, Op::Leaf, "constant")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are finite and shape-consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    // ---- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if numel(self.shape(bias)) != c {
            return Err(dim_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(c).flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv)).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddRowBias(x, bias), "add_row_bias")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), "scale")
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), "gelu")
    }

    /// Per-row normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if c == 0 {
            return Err(dim_err("softmax_rows", self.shape(x), &[1]));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[nseq·seq_len × d]` stacks of independent sequences;
    /// attention never crosses a sequence boundary.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(dim_err("attention", &shape, self.shape(k)));
        }
        let (rows, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!("width {d} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(dim_err("attention", &shape, &[seq_len]));
        }
        let nseq = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let t = seq_len;
        let mut probs = vec![0.0; nseq * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for s in 0..nseq {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qv[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * t..(i + 1) * t];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kv[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vv[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        self.push(shape, out, Op::Attention { q, k, v, heads, seq_len, probs }, "attention")
    }

    /// Attention weights recorded by an attention node, `[nseq][head][query][key]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Assembles a matrix row by row from rows of `sources`.
    ///
    /// All sources must share the same row width. Gradients scatter-add back,
    /// so a source row may be referenced any number of times.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<RowRef>) -> Result<Var> {
        let width = match sources.first() {
            Some(s) => rows_cols(self.shape(*s)).1,
            None => return Err(Error::Config("gather_rows needs at least one source".into())),
        };
        for s in sources {
            if rows_cols(self.shape(*s)).1 != width {
                return Err(dim_err("gather_rows", self.shape(sources[0]), self.shape(*s)));
            }
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &(src, row) in &index {
            let s = *sources
                .get(src as usize)
                .ok_or_else(|| Error::Config("gather_rows source slot out of range".into()))?;
            let (r, _) = rows_cols(self.shape(s));
            if row as usize >= r {
                return Err(dim_err("gather_rows", self.shape(s), &[row as usize]));
            }
            out.extend_from_slice(&self.value(s)[row as usize * width..(row as usize + 1) * width]);
        }
        let n = index.len();
        self.push(vec![n, width], out, Op::Gather { sources: sources.to_vec(), index }, "gather_rows")
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, _) = rows_cols(self.shape(x));
        if start > end || end > r {
            return Err(dim_err("slice_rows", self.shape(x), &[start, end]));
        }
        let index = (start..end).map(|i| (0, i as u32)).collect();
        self.gather_rows(&[x], index)
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut index = Vec::new();
        for (slot, p) in parts.iter().enumerate() {
            let (r, _) = rows_cols(self.shape(*p));
            index.extend((0..r).map(|i| (slot as u32, i as u32)));
        }
        self.gather_rows(parts, index)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x), "reshape")
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut inv_norm = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm == 0.0 {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            inv_norm[i] = 1.0 / norm;
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::L2NormalizeRows { x, inv_norm }, "l2_normalize_rows")
    }

    /// Row sums, `[r×c] -> [r]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        let out = self.value(x).chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        self.push(vec![r], out, Op::SumRows(x), "sum_rows")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(logits));
        if r != targets.len() || r == 0 {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::UnknownClass { id: bad, count: c });
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[t];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss /= r as f64;
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, "cross_entropy")
    }

    /// `mu + exp(log_var / 2) ⊙ eps` with `eps` held constant.
    pub fn reparam(&mut self, mu: Var, log_var: Var, eps: Vec<f64>) -> Result<Var> {
        self.same_shape("reparam", mu, log_var)?;
        if eps.len() != numel(self.shape(mu)) {
            return Err(dim_err("reparam", self.shape(mu), &[eps.len()]));
        }
        let out = self
            .value(mu)
            .iter()
            .zip(self.value(log_var))
            .zip(&eps)
            .map(|((m, l), e)| m + libm::exp(0.5 * l) * e)
            .collect();
        self.push(self.shape(mu).to_vec(), out, Op::Reparam { mu, log_var, eps }, "reparam")
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// `KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p))` summed over all coordinates.
    pub fn kl_diag(&mut self, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var> {
        for other in [lv_q, mu_p, lv_p] {
            self.same_shape("kl_diag", mu_q, other)?;
        }
        let total = kl_sum(self.value(mu_q), self.value(lv_q), self.value(mu_p), self.value(lv_p));
        self.push(vec![1], vec![total], Op::KlDiag { mu_q, lv_q, mu_p, lv_p }, "kl_diag")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = numel(self.shape(x));
        if n == 0 {
            return Err(dim_err("mean", self.shape(x), &[1]));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], Op::Mean(x), "mean")
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; n.value.len()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        t.grad = self.grad(v).map(<[f64]>::to_vec);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += aik * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if rg(*b) {
                    let c = len(*b);
                    let gb = accumulate(&mut grads[b.0], c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(x, s) => {
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v);
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let xv = &self.nodes[x.0].value;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = len(*gamma);
                let r = inv_std.len();
                let gv = &self.nodes[gamma.0].value;
                if rg(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = accumulate(&mut grads[beta.0], c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.0], r * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(&xhat[i * c..(i + 1) * c]).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if rg(*x) {
                    let c = *node.shape.last().unwrap_or(&1);
                    let y = &node.value;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (i, (yrow, grow)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, seq_len, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, *seq_len, probs, g, grads)
            }
            Op::Gather { sources, index } => {
                let width = *node.shape.last().unwrap_or(&1);
                for (r, &(src, row)) in index.iter().enumerate() {
                    let s = sources[src as usize];
                    if !rg(s) {
                        continue;
                    }
                    let slot = accumulate(&mut grads[s.0], len(s));
                    let dst = &mut slot[row as usize * width..(row as usize + 1) * width];
                    dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(o, v)| *o += v);
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                if rg(*x) {
                    let c = *node.shape.last().unwrap_or(&1);
                    let y = &node.value;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..inv_norm.len() {
                        let yrow = &y[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += (grow[j] - yrow[j] * dot) * inv_norm[i];
                        }
                    }
                }
            }
            Op::SumRows(x) => {
                if rg(*x) {
                    let n = len(*x);
                    let c = if g.is_empty() { 0 } else { n / g.len() };
                    let gx = accumulate(&mut grads[x.0], n);
                    for (i, gi) in g.iter().enumerate() {
                        gx[i * c..(i + 1) * c].iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if rg(*logits) {
                    let r = targets.len();
                    let c = probs.len() / r;
                    let w = g[0] / r as f64;
                    let gl = accumulate(&mut grads[logits.0], r * c);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += w * (probs[i * c + j] - ind);
                        }
                    }
                }
            }
            Op::Reparam { mu, log_var, eps } => {
                if rg(*mu) {
                    let gm = accumulate(&mut grads[mu.0], g.len());
                    gm.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if rg(*log_var) {
                    let lv = &self.nodes[log_var.0].value;
                    let gl = accumulate(&mut grads[log_var.0], g.len());
                    for i in 0..g.len() {
                        gl[i] += g[i] * eps[i] * 0.5 * libm::exp(0.5 * lv[i]);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if rg(*x) {
                    let xv = &self.nodes[x.0].value;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::KlDiag { mu_q, lv_q, mu_p, lv_p } => {
                let n = len(*mu_q);
                let (mq, lq, mp, lp) = (
                    &self.nodes[mu_q.0].value,
                    &self.nodes[lv_q.0].value,
                    &self.nodes[mu_p.0].value,
                    &self.nodes[lv_p.0].value,
                );
                let gs = g[0];
                let inv_vp: Vec<f64> = lp.iter().map(|l| libm::exp(-l)).collect();
                if rg(*mu_q) {
                    let o = accumulate(&mut grads[mu_q.0], n);
                    for i in 0..n {
                        o[i] += gs * (mq[i] - mp[i]) * inv_vp[i];
                    }
                }
                if rg(*mu_p) {
                    let o = accumulate(&mut grads[mu_p.0], n);
                    for i in 0..n {
                        o[i] -= gs * (mq[i] - mp[i]) * inv_vp[i];
                    }
                }
                if rg(*lv_q) {
                    let o = accumulate(&mut grads[lv_q.0], n);
                    for i in 0..n {
                        o[i] += gs * 0.5 * (libm::exp(lq[i] - lp[i]) - 1.0);
                    }
                }
                if rg(*lv_p) {
                    let o = accumulate(&mut grads[lv_p.0], n);
                    for i in 0..n {
                        let dm = mq[i] - mp[i];
                        o[i] += gs * 0.5 * (1.0 - libm::exp(lq[i] - lp[i]) - dm * dm * inv_vp[i]);
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if rg(*x) {
                    let n = len(*x);
                    let w = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    let gx = accumulate(&mut grads[x.0], n);
                    gx.iter_mut().for_each(|o| *o += w);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        t: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let rg = |x: Var| self.nodes[x.0].requires_grad;
        let (rows, d) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
        let nseq = rows / t;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gvv = vec![0.0; rows * d];
        let mut dp = vec![0.0; t];
        for s in 0..nseq {
            for h in 0..heads {
                let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                let col = |row: usize| (s * t + row) * d + h * dh;
                for i in 0..t {
                    let gi = &g[col(i)..col(i) + dh];
                    let prow = &p[i * t..(i + 1) * t];
                    for j in 0..t {
                        let vj = &vv[col(j)..col(j) + dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let pij = prow[j];
                        for (o, &x) in gvv[col(j)..col(j) + dh].iter_mut().zip(gi) {
                            *o += pij * x;
                        }
                    }
                    let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            gq[col(i) + c] += ds * kv[col(j) + c];
                            gk[col(j) + c] += ds * qv[col(i) + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
            if rg(var) {
                let o = accumulate(&mut grads[var.0], rows * d);
                o.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Closed-form diagonal Gaussian KL summed over coordinates.
pub(crate) fn kl_sum(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mq.len() {
        let d = lq[i] - lp[i];
        let dm = mq[i] - mp[i];
        let term = 0.5 * ((libm::expm1(d) - d) + dm * dm * libm::exp(-lp[i]));
        total += term.max(0.0);
    }
    total
}
