//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are appended to a [`Graph`] in evaluation order, so the
//! append order is already a topological order. [`Graph::backward`] walks
//! the tape once in reverse, visiting each node exactly once.
//!
//! Leaf gradients accumulate across repeated `backward` calls; interior
//! gradients are recomputed from scratch on every call.

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Variance floor added inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    HalfMse { pred: Var, target: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SliceBlock { x: Var, r0: usize, c0: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    MeanRowGroups { x: Var, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    visits: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if populated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of node visits made by the most recent `backward` call.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dimensions differ: [{m}x{k}] . [{k2}x{n}]")));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a . b^T`, the natural product for `x W^T` with filters as rows of W.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_bt inner dimensions differ: [{m}x{k}] . [{n}x{k2}]^T")));
        }
        let out = matmul_bt_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!("{name}: shapes differ {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let t = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let t = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let t = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!("add_row: bias length {} != row length {n}", self.value(bias).len())));
        }
        let b = self.data(bias).to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(r, v)| *r += v);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so non-finite values stay visible downstream.
        let t = self.value(a).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Normalizes each row over the last dimension, then applies `gain`, `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(Error::Dimension("layernorm over an empty dimension".into()));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dimension(format!("layernorm: affine params must have length {n}")));
        }
        let (g, b) = (self.data(gain).to_vec(), self.data(bias).to_vec());
        let rows = self.value(x).len() / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.value(x).rows() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let out: Vec<f64> = xhat.chunks(n).flat_map(|r| r.iter().zip(&g).zip(&b).map(|((h, g), b)| h * g + b)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let n = t.last_dim();
        for row in t.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// `sum((pred - target)^2) / (2 * rows)`.
    pub fn half_mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Dimension("half_mse: prediction and target shapes differ".into()));
        }
        let rows = self.value(pred).len() / self.value(pred).last_dim();
        let sq: f64 = self.data(pred).iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let t = Tensor::scalar(sq / (2.0 * rows as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(t, Op::HalfMse { pred, target: target.data().to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Rows `r0..r0+nr`, columns `c0..c0+nc` of a matrix.
    pub fn slice_block(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if nr == 0 || nc == 0 || r0 + nr > m || c0 + nc > n {
            return Err(Error::Dimension(format!("slice [{r0}+{nr}, {c0}+{nc}] out of bounds for [{m}x{n}]")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            out.extend_from_slice(&src[i * n + c0..i * n + c0 + nc]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![nr, nc], out)?, Op::SliceBlock { x, r0, c0 }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0])?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::Dimension("concat_rows: column counts differ".into()));
            }
            m += pm;
            out.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("index {bad} out of range for table of {v} rows")));
        }
        let src = self.data(table);
        let out: Vec<f64> = idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(vec![idx.len(), d], out)?, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if group == 0 || m % group != 0 {
            return Err(Error::Dimension(format!("{m} rows not divisible into groups of {group}")));
        }
        let src = self.data(x);
        let mut out = vec![0.0; (m / group) * n];
        for i in 0..m {
            let o = &mut out[(i / group) * n..(i / group + 1) * n];
            o.iter_mut().zip(&src[i * n..(i + 1) * n]).for_each(|(o, v)| *o += v / group as f64);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m / group, n], out)?, Op::MeanRowGroups { x, group }, rg))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].value.shape())));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            self.visits += 1;
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g)?;
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.1;
                if self.nodes[a.0].requires_grad {
                    let da = matmul_bt_raw(g, self.data(*b), m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_at_raw(self.data(*a), g, m, k, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.0;
                if self.nodes[a.0].requires_grad {
                    let da = matmul_raw(g, self.data(*b), m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_at_raw(g, self.data(*a), m, n, k);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a)?;
                let gt = Tensor::new(vec![n, m], g.to_vec())?.transpose()?;
                self.accumulate(*a, gt.data());
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.accumulate(*a, &da);
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, g);
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                self.accumulate(*bias, &db);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g.iter().zip(self.data(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.value(*gain).len();
                let gv = self.data(*gain).to_vec();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                        let dh = grow[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let inv = inv_std[r];
                    let nf = n as f64;
                    for j in 0..n {
                        let dh = grow[j] * gv[j];
                        dx[r * n + j] = inv / nf * (nf * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.last_dim();
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (b, c) = self.dims2(*logits)?;
                let scale = g[0] / b as f64;
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(c).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(*logits, &d);
            }
            Op::HalfMse { pred, target } => {
                let rows = self.value(*pred).len() / self.value(*pred).last_dim();
                let scale = g[0] / rows as f64;
                let d: Vec<f64> = self.data(*pred).iter().zip(target).map(|(p, t)| (p - t) * scale).collect();
                self.accumulate(*pred, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                self.accumulate(*a, &d);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let d = vec![g[0] / len as f64; len];
                self.accumulate(*a, &d);
            }
            Op::SliceBlock { x, r0, c0 } => {
                let n = self.dims2(*x)?.1;
                let (nr, nc) = self.nodes[idx].value.dims2()?;
                let mut d = vec![0.0; self.value(*x).len()];
                for i in 0..nr {
                    let dst = (r0 + i) * n + c0;
                    d[dst..dst + nc].copy_from_slice(&g[i * nc..(i + 1) * nc]);
                }
                self.accumulate(*x, &d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = self.nodes[idx].value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p)?.1;
                    let d: Vec<f64> = (0..m).flat_map(|i| g[i * total + offset..i * total + offset + w].iter().copied()).collect();
                    self.accumulate(p, &d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows { table, idx: rows } => {
                let d = self.dims2(*table)?.1;
                let mut dt = vec![0.0; self.value(*table).len()];
                for (i, &r) in rows.iter().enumerate() {
                    dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                }
                self.accumulate(*table, &dt);
            }
            Op::MeanRowGroups { x, group } => {
                let (m, n) = self.dims2(*x)?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let src = &g[(i / group) * n..(i / group + 1) * n];
                    d[i * n..(i + 1) * n].iter_mut().zip(src).for_each(|(d, s)| *d = s / *group as f64);
                }
                self.accumulate(*x, &d);
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap().with_grad(true)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(param(vec![0.5, -1.0, 2.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::new();
        let w = g.leaf(param(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let mut g = Graph::new();
        let w = g.leaf(param(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(param(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn scale_by_zero_kills_value_and_grad() {
        let mut g = Graph::new();
        let w = g.leaf(param(vec![1.0, -3.0]));
        let y = g.scale(w, 0.0);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_constant_and_symmetric_rows() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = g.layernorm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
        let y = g.layernorm(x, gain, bias).unwrap();
        let want = 1.0 / (1.0f64 + LAYERNORM_EPS).sqrt();
        let got = g.value(y).data();
        assert!((got[0] + want).abs() < 1e-15 && (got[1] - want).abs() < 1e-15);
        assert!((got[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap());
        let loss = g.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dominant_logit_drives_loss_to_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 3], vec![800.0, 0.0, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.softmax_cross_entropy(logits, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_every_node_once() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad(true));
        let b = g.constant(Tensor::eye(2));
        let c = g.matmul(a, b).unwrap();
        let d = g.relu(c);
        let e = g.add(d, c).unwrap();
        let loss = g.sum(e);
        g.backward(loss).unwrap();
        assert_eq!(g.backward_visits(), g.len());
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0];
        let x = g.leaf(param(data.clone()));
        let y = g.gelu(x);
        let z = g.mul(y, x).unwrap();
        let loss = g.sum(z);
        g.backward(loss).unwrap();
        assert_eq!(g.value(x).data(), data.as_slice());
    }
}
