use std::sync::Arc;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon inside the layer-normalization square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const KL_CLAMP: f64 = 1e-6;
const GELU_C: f64 = 0.044715;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        positions: Vec<usize>,
        rows: Var,
    },
    StackRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SmoothL1(Var, Var),
    BernoulliKl {
        x: Var,
        rho: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations. Inputs are always recorded before the ops
/// that consume them, so reverse insertion order is a valid backward order.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let t = (s * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

fn bernoulli_kl(rho: f64, q: f64) -> f64 {
    let q = q.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln()
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `b` broadcasts onto `a` when its shape is a suffix of `a`'s.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Shared tensors are not copied.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: &Arc<Tensor>) -> Var {
        self.leaf(Arc::clone(value), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to `v`, if `v` is a
    /// leaf that requires grad and received any contribution.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Like [`Graph::grad`] but returns zeros for leaves that got no contribution.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, self.shape(v), &[0, 0]))
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulBt(a, b), rg))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let n = bd.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b` where `b` broadcasts over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("map preserves shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid_scalar);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu_scalar);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let n = *t.shape().last().unwrap_or(&1);
        for row in t.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("causal_softmax", a)?;
        if m != n {
            return Err(Error::dim("causal_softmax", &[m, n], &[m, m]));
        }
        let mut t = self.value(a).clone();
        for (i, row) in t.data_mut().chunks_exact_mut(n).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::CausalSoftmax(a), rg))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap_or(&1);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / n;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over axis 0 of a `[m×n]` matrix, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mean_rows", a)?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Row lookup into a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", &[v, d], &[0]));
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::dim("gather_rows", &[v, d], &[id]));
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` with row `positions[r]` replaced by row `r` of `rows`.
    pub fn replace_rows(&mut self, base: Var, positions: &[usize], rows: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("replace_rows", base)?;
        let (r, d2) = self.matrix_dims("replace_rows", rows)?;
        if d != d2 || r != positions.len() {
            return Err(Error::dim("replace_rows", &[positions.len(), d], &[r, d2]));
        }
        let mut seen = vec![false; t];
        for &p in positions {
            if p >= t || seen[p] {
                return Err(Error::Graph(format!(
                    "replace_rows: position {p} out of range or repeated"
                )));
            }
            seen[p] = true;
        }
        let mut out = self.value(base).clone();
        let src = self.value(rows).data();
        for (i, &p) in positions.iter().enumerate() {
            out.data_mut()[p * d..(p + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(base) || self.rg(rows);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                positions: positions.to_vec(),
                rows,
            },
            rg,
        ))
    }

    /// Concatenates vectors `[n]` or matrices `[r×n]` along axis 0.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Graph("stack_rows of nothing".into()))?;
        let n = *self.shape(first).last().unwrap_or(&1);
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || *t.shape().last().unwrap_or(&1) != n {
                return Err(Error::dim("stack_rows", self.shape(first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, n, data)?,
            Op::StackRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("select_rows", x)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::dim("select_rows", &[m, n], rows));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(tx.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), n, data)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for row in tx.data().chunks_exact(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(m, len, data)?,
            Op::SliceCols { x, start, len },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Graph("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.matrix_dims("concat_cols", p)?;
            if mp != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Elementwise Smooth-L1 (β = 1) of `a − b`; same shapes.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("smooth_l1", self.shape(a), self.shape(b)));
        }
        let t = self.broadcast_binary("smooth_l1", a, b, |x, y| smooth_l1(x - y))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::SmoothL1(a, b), rg))
    }

    /// Elementwise Bernoulli `KL(ρ ‖ x)` with `x` clamped to `[1e-6, 1 − 1e-6]`.
    pub fn bernoulli_kl(&mut self, x: Var, rho: f64) -> Var {
        let t = self.map(x, |q| bernoulli_kl(rho, q));
        let rg = self.rg(x);
        self.push(t, Op::BernoulliKl { x, rho }, rg)
    }

    /// Mean over rows of `−ln softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != m || targets.iter().any(|&t| t >= v) {
            return Err(Error::dim("cross_entropy", &[m, v], &[targets.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Graph)) {
        if !self.rg(v) {
            return;
        }
        let mut g = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(&mut g, self);
        self.nodes[v.0].grad = Some(g);
    }

    fn acc_reduced(&mut self, b: Var, upstream: &[f64], sign: f64) {
        self.acc(b, |g, _| {
            let n = g.len();
            for (i, u) in upstream.iter().enumerate() {
                g[i % n] += sign * u;
            }
        });
    }

    /// Reverse-mode sweep from a scalar `root`. Fills `grad` for every
    /// requires-grad leaf. A second call without [`Graph::reset`] is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset() first".into(),
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("root {} not on graph", root.0)));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(up) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &up);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop(&mut self, idx: usize, op: &Op, up: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.rg(*a) {
                    let d = matmul_nt(up, self.value(*b).data(), m, n, k);
                    self.acc(*a, |g, _| add_into(g, &d));
                }
                if self.rg(*b) {
                    let d = matmul_tn(self.value(*a).data(), up, m, k, n);
                    self.acc(*b, |g, _| add_into(g, &d));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                if self.rg(*a) {
                    let d = matmul_nn(up, self.value(*b).data(), m, n, k);
                    self.acc(*a, |g, _| add_into(g, &d));
                }
                if self.rg(*b) {
                    let d = matmul_tn(up, self.value(*a).data(), m, n, k);
                    self.acc(*b, |g, _| add_into(g, &d));
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, |g, _| add_into(g, up));
                self.acc_reduced(*b, up, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc(*a, |g, _| add_into(g, up));
                self.acc_reduced(*b, up, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g, gr| {
                    for ((gv, u), bv) in g.iter_mut().zip(up).zip(gr.value(b).data()) {
                        *gv += u * bv;
                    }
                });
                self.acc(b, |g, gr| {
                    for ((gv, u), av) in g.iter_mut().zip(up).zip(gr.value(a).data()) {
                        *gv += u * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |g, _| {
                    for (gv, u) in g.iter_mut().zip(up) {
                        *gv += c * u;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = Arc::clone(&self.nodes[idx].value);
                self.acc(*a, |g, _| {
                    for ((gv, u), yv) in g.iter_mut().zip(up).zip(y.data()) {
                        *gv += u * yv * (1.0 - yv);
                    }
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                self.acc(a, |g, gr| {
                    for ((gv, u), xv) in g.iter_mut().zip(up).zip(gr.value(a).data()) {
                        *gv += u * gelu_grad(*xv);
                    }
                });
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = Arc::clone(&self.nodes[idx].value);
                let n = *y.shape().last().unwrap_or(&1);
                self.acc(*a, |g, _| {
                    for ((grow, urow), yrow) in g
                        .chunks_exact_mut(n)
                        .zip(up.chunks_exact(n))
                        .zip(y.data().chunks_exact(n))
                    {
                        let s: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y).sum();
                        for ((gv, u), yv) in grow.iter_mut().zip(urow).zip(yrow) {
                            *gv += yv * (u - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                if self.rg(*gamma) {
                    self.acc(*gamma, |g, _| {
                        for (urow, hrow) in up.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for ((gv, u), h) in g.iter_mut().zip(urow).zip(hrow) {
                                *gv += u * h;
                            }
                        }
                    });
                }
                if self.rg(*beta) {
                    self.acc(*beta, |g, _| {
                        for urow in up.chunks_exact(n) {
                            add_into(g, urow);
                        }
                    });
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    self.acc(*x, |g, _| {
                        let nf = n as f64;
                        for (((grow, urow), hrow), r) in g
                            .chunks_exact_mut(n)
                            .zip(up.chunks_exact(n))
                            .zip(xhat.chunks_exact(n))
                            .zip(rstd)
                        {
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..n {
                                let d = urow[j] * gam[j];
                                sum_d += d;
                                sum_dh += d * hrow[j];
                            }
                            for j in 0..n {
                                let d = urow[j] * gam[j];
                                grow[j] += r / nf * (nf * d - sum_d - hrow[j] * sum_dh);
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let u = up[0];
                self.acc(*a, |g, _| g.iter_mut().for_each(|v| *v += u));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let u = up[0] / n;
                self.acc(*a, |g, _| g.iter_mut().for_each(|v| *v += u));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                self.acc(*a, |g, _| {
                    for grow in g.chunks_exact_mut(n) {
                        for (gv, u) in grow.iter_mut().zip(up) {
                            *gv += u / m as f64;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).dims2().unwrap().1;
                self.acc(*table, |g, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &up[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ReplaceRows {
                base,
                positions,
                rows,
            } => {
                let d = self.value(*base).dims2().unwrap().1;
                self.acc(*base, |g, _| {
                    add_into(g, up);
                    for &p in positions {
                        for (gv, u) in g[p * d..(p + 1) * d].iter_mut().zip(&up[p * d..]) {
                            *gv -= u;
                        }
                    }
                });
                self.acc(*rows, |g, _| {
                    for (r, &p) in positions.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &up[p * d..(p + 1) * d]);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(p, |g, _| add_into(g, &up[off..off + len]));
                    off += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let n = self.value(*x).dims2().unwrap().1;
                self.acc(*x, |g, _| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * n..(r + 1) * n], &up[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = self.value(*x).dims2().unwrap().1;
                let (start, len) = (*start, *len);
                self.acc(*x, |g, _| {
                    for (grow, urow) in g.chunks_exact_mut(n).zip(up.chunks_exact(len)) {
                        add_into(&mut grow[start..start + len], urow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n: usize = *self.nodes[idx].value.shape().last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    self.acc(p, |g, _| {
                        for (grow, urow) in g.chunks_exact_mut(w).zip(up.chunks_exact(n)) {
                            add_into(grow, &urow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => self.acc(*x, |g, _| add_into(g, up)),
            Op::SmoothL1(a, b) => {
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .zip(up)
                    .map(|((x, y), u)| {
                        let delta = x - y;
                        let s = if delta.abs() < 1.0 { delta } else { delta.signum() };
                        s * u
                    })
                    .collect();
                self.acc(*a, |g, _| add_into(g, &d));
                self.acc(*b, |g, _| {
                    for (gv, v) in g.iter_mut().zip(&d) {
                        *gv -= v;
                    }
                });
            }
            Op::BernoulliKl { x, rho } => {
                let (x, rho) = (*x, *rho);
                self.acc(x, |g, gr| {
                    for ((gv, u), &q) in g.iter_mut().zip(up).zip(gr.value(x).data()) {
                        if (KL_CLAMP..=1.0 - KL_CLAMP).contains(&q) {
                            *gv += u * (-rho / q + (1.0 - rho) / (1.0 - q));
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).dims2().unwrap().1;
                let scale = up[0] / targets.len() as f64;
                self.acc(*logits, |g, _| {
                    for (r, &t) in targets.iter().enumerate() {
                        let grow = &mut g[r * v..(r + 1) * v];
                        for (gv, p) in grow.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *gv += scale * p;
                        }
                        grow[t] -= scale;
                    }
                });
            }
        }
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (gv, v) in g.iter_mut().zip(d) {
        *gv += v;
    }
}
