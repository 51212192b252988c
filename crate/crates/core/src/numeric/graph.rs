//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough structure to route gradients back to its inputs. Parameters
//! enter the tape by value from a [`ParamStore`]; after
//! [`Graph::backward`] their gradients are accumulated back into the store.

use std::sync::Arc;

use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc};
use super::{Csr, NumericError, ParamId, ParamStore, Tensor};

type Result<T> = std::result::Result<T, NumericError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SpMM(Arc<Csr>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    VStack(Vec<Var>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Cos(Var),
    Log(Var),
    Relu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    L2NormSq(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>, Var),
    SegmentMean(Var, Vec<usize>, Vec<f64>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentWeightedSum(Var, Var, Vec<usize>),
    RowDot(Var, Var),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread; build one per forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into `store` and marks the store as having
    /// fresh gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.leaves[node] {
                store.add_grad(id, g.data());
            }
        }
        store.mark_grads_ready();
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn bad_shape(op: &'static str, expected: &str, shape: &[usize]) -> NumericError {
    NumericError::BadShape {
        op,
        expected: expected.to_string(),
        shape: shape.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn row_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite(name));
        }
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient but is not tied to a store.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.value(id).clone();
        self.leaf(value, Op::Param(id), true)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        t.dims2().ok_or_else(|| bad_shape(op, "2-D", t.shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), &[a, b], "matmul_t")
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, m: Arc<Csr>, x: Var) -> Result<Var> {
        let (r, n) = self.mat(x, "spmm")?;
        if r != m.cols() {
            return Err(shape_err("spmm", &[m.rows(), m.cols()], self.shape(x)));
        }
        let mut out = vec![0.0; m.rows() * n];
        m.mul_acc(self.value(x).data(), n, &mut out);
        let value = Tensor::new(vec![m.rows(), n], out)?;
        self.push(value, Op::SpMM(m, x), &[x], "spmm")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.last_dim();
        if tb.ndim() != 1 || tb.len() != c {
            return Err(shape_err("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(v, Op::AddRow(a, b), &[a, b], "add_row")
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| scale * x + shift).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Affine(a, scale), &[a], "affine")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    /// Concatenation along the last axis. All inputs share leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| bad_shape("concat", "at least one input", &[]))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// Stacks rows. Each input is `[r, c]` or a `[c]` vector (one row).
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| bad_shape("vstack", "at least one input", &[]))?;
        let c = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() == 0 || t.ndim() > 2 || t.last_dim() != c {
                return Err(shape_err("vstack", self.shape(*first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c.max(1);
        let v = Tensor::new(vec![rows, c], data)?;
        self.push(v, Op::VStack(parts.to_vec()), parts, "vstack")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid)?;
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh)?;
        self.push(v, Op::Tanh(a), &[a], "tanh")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::cos)?;
        self.push(v, Op::Cos(a), &[a], "cos")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(NumericError::LogDomain(bad));
        }
        let v = self.map(a, f64::ln)?;
        self.push(v, Op::Log(a), &[a], "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0))?;
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    /// Numerically stable `ln(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, log_sigmoid)?;
        self.push(v, Op::LogSigmoid(a), &[a], "log_sigmoid")
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.last_dim();
        let mut data = vec![0.0; t.len()];
        for (row, out) in t.data().chunks(c).zip(data.chunks_mut(c)) {
            row_softmax(row, out);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::Softmax(a), &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.last_dim();
        let mut data = vec![0.0; t.len()];
        for (row, out) in t.data().chunks(c).zip(data.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push(v, Op::LogSoftmax(a), &[a], "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(bad_shape("mean", "non-empty", t.shape()));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), &[a], "mean")
    }

    /// Sum of squares of all entries.
    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).squared_norm());
        self.push(v, Op::L2NormSq(a), &[a], "l2_norm_sq")
    }

    /// Rows of a 2-D tensor (or elements of a vector) at `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (n, c, vector) = match t.shape() {
            [n] => (*n, 1, true),
            [n, c] => (*n, *c, false),
            s => return Err(bad_shape("gather_rows", "1-D or 2-D", s)),
        };
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(NumericError::IndexOutOfRange { index: i, len: n });
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let shape = if vector { vec![idx.len()] } else { vec![idx.len(), c] };
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::GatherRows(a, idx.to_vec()), &[a], "gather_rows")
    }

    /// Copy of `base` with the rows at (distinct) `idx` replaced by `rows`.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], rows: Var) -> Result<Var> {
        let (n, c) = self.mat(base, "scatter_rows")?;
        let (r, c2) = self.mat(rows, "scatter_rows")?;
        if c != c2 || r != idx.len() {
            return Err(shape_err("scatter_rows", self.shape(base), self.shape(rows)));
        }
        let mut data = self.value(base).data().to_vec();
        let src = self.value(rows).data();
        for (k, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(NumericError::IndexOutOfRange { index: i, len: n });
            }
            data[i * c..(i + 1) * c].copy_from_slice(&src[k * c..(k + 1) * c]);
        }
        let v = Tensor::new(vec![n, c], data)?;
        self.push(v, Op::ScatterRows(base, idx.to_vec(), rows), &[base, rows], "scatter_rows")
    }

    /// Mean of the rows of `a` grouped by `seg` into `n` segments. Empty
    /// segments yield zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        let (e, c) = self.mat(a, "segment_mean")?;
        if seg.len() != e {
            return Err(shape_err("segment_mean", self.shape(a), &[seg.len()]));
        }
        let mut counts = vec![0.0; n];
        for &s in seg {
            if s >= n {
                return Err(NumericError::IndexOutOfRange { index: s, len: n });
            }
            counts[s] += 1.0;
        }
        let inv: Vec<f64> = counts.iter().map(|&k| if k > 0.0 { 1.0 / k } else { 0.0 }).collect();
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for (k, &s) in seg.iter().enumerate() {
            for j in 0..c {
                data[s * c + j] += inv[s] * src[k * c + j];
            }
        }
        let v = Tensor::new(vec![n, c], data)?;
        self.push(v, Op::SegmentMean(a, seg.to_vec(), inv), &[a], "segment_mean")
    }

    /// Softmax of a score vector within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 || t.len() != seg.len() {
            return Err(shape_err("segment_softmax", t.shape(), &[seg.len()]));
        }
        let mut max = vec![f64::NEG_INFINITY; n];
        for (&x, &s) in t.data().iter().zip(seg) {
            if s >= n {
                return Err(NumericError::IndexOutOfRange { index: s, len: n });
            }
            max[s] = max[s].max(x);
        }
        let mut data: Vec<f64> = t.data().iter().zip(seg).map(|(&x, &s)| (x - max[s]).exp()).collect();
        let mut total = vec![0.0; n];
        for (&y, &s) in data.iter().zip(seg) {
            total[s] += y;
        }
        for (y, &s) in data.iter_mut().zip(seg) {
            *y /= total[s];
        }
        let v = Tensor::vector(data);
        self.push(v, Op::SegmentSoftmax(a, seg.to_vec()), &[a], "segment_softmax")
    }

    /// `out[s] = Σ_{k: seg[k]=s} w[k] · values[k]`.
    pub fn segment_weighted_sum(&mut self, w: Var, values: Var, seg: &[usize], n: usize) -> Result<Var> {
        let (e, c) = self.mat(values, "segment_weighted_sum")?;
        let tw = self.value(w);
        if tw.ndim() != 1 || tw.len() != e || seg.len() != e {
            return Err(shape_err("segment_weighted_sum", tw.shape(), self.shape(values)));
        }
        let src = self.value(values).data();
        let mut data = vec![0.0; n * c];
        for (k, &s) in seg.iter().enumerate() {
            if s >= n {
                return Err(NumericError::IndexOutOfRange { index: s, len: n });
            }
            let wk = tw.data()[k];
            for j in 0..c {
                data[s * c + j] += wk * src[k * c + j];
            }
        }
        let v = Tensor::new(vec![n, c], data)?;
        self.push(v, Op::SegmentWeightedSum(w, values, seg.to_vec()), &[w, values], "segment_weighted_sum")
    }

    /// Row-wise inner products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (e, c) = self.mat(a, "row_dot")?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("row_dot", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let data = (0..e).map(|k| dot(&ta[k * c..(k + 1) * c], &tb[k * c..(k + 1) * c])).collect();
        self.push(Tensor::vector(data), Op::RowDot(a, b), &[a, b], "row_dot")
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(a, "pick")?;
        if idx.len() != r {
            return Err(shape_err("pick", self.shape(a), &[idx.len()]));
        }
        let t = self.value(a).data();
        let mut data = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(NumericError::IndexOutOfRange { index: j, len: c });
            }
            data.push(t[i * c + j]);
        }
        self.push(Tensor::vector(data), Op::Pick(a, idx.to_vec()), &[a], "pick")
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let mut leaves = Vec::with_capacity(n);
        let mut params = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let leaf = match node.op {
                Op::Param(id) => {
                    params.push((id, i));
                    true
                }
                Op::Leaf => true,
                _ => false,
            };
            leaves.push(match (leaf, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            });
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Zero-initialised gradient buffer for a parent.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (val(*a).dims2().unwrap(), val(*b).dims2().unwrap());
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_bt_acc(g, val(*b).data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm_at_acc(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let ((m, k), (n, _)) = (val(*a).dims2().unwrap(), val(*b).dims2().unwrap());
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_acc(g, val(*b).data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, n * k);
                    gemm_at_acc(g, val(*a).data(), gb, m, n, k);
                }
            }
            Op::SpMM(mat, x) => {
                let (r, n) = val(*x).dims2().unwrap();
                let gx = slot(grads, *x, r * n);
                mat.mul_t_acc(g, n, gx);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    for (s, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                if needs(*b) {
                    for (s, &gv) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *s += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data();
                    for ((s, &gv), &x) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *s += gv * x;
                    }
                }
                if needs(*b) {
                    let av = val(*a).data();
                    for ((s, &gv), &x) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *s += gv * x;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    for (s, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                if needs(*b) {
                    let c = val(*b).len();
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        for (s, &gv) in gb.iter_mut().zip(row) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Affine(a, scale) => {
                for (s, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *s += scale * gv;
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if needs(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        for (s, &gv) in slot(grads, p, len).iter_mut().zip(&g[offset..offset + len]) {
                            *s += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                for (s, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *s += gv;
                }
            }
            Op::Sigmoid(a) => {
                for ((s, &gv), &yv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *s += gv * yv * (1.0 - yv);
                }
            }
            Op::Tanh(a) => {
                for ((s, &gv), &yv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *s += gv * (1.0 - yv * yv);
                }
            }
            Op::Cos(a) => {
                let x = val(*a).data();
                for ((s, &gv), &xv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    *s -= gv * xv.sin();
                }
            }
            Op::Log(a) => {
                let x = val(*a).data();
                for ((s, &gv), &xv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    *s += gv / xv;
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                for ((s, &gv), &xv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *s += gv;
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let x = val(*a).data();
                for ((s, &gv), &xv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                    *s += gv * sigmoid(-xv);
                }
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for ((gr, yr), sr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let inner = dot(gr, yr);
                    for ((s, &gv), &yv) in sr.iter_mut().zip(gr).zip(yr) {
                        *s += yv * (gv - inner);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for ((gr, yr), sr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((s, &gv), &yv) in sr.iter_mut().zip(gr).zip(yr) {
                        *s += gv - yv.exp() * total;
                    }
                }
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                for s in slot(grads, *a, len).iter_mut() {
                    *s += g[0];
                }
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                let share = g[0] / len as f64;
                for s in slot(grads, *a, len).iter_mut() {
                    *s += share;
                }
            }
            Op::L2NormSq(a) => {
                let x = val(*a).data();
                for (s, &xv) in slot(grads, *a, x.len()).iter_mut().zip(x) {
                    *s += 2.0 * xv * g[0];
                }
            }
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let c = if src.ndim() == 1 { 1 } else { src.last_dim() };
                let ga = slot(grads, *a, src.len());
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
            }
            Op::ScatterRows(base, idx, rows) => {
                let c = node.value.last_dim();
                if needs(*base) {
                    let gb = slot(grads, *base, g.len());
                    for (s, &gv) in gb.iter_mut().zip(g) {
                        *s += gv;
                    }
                    // Replaced rows do not flow back to the base.
                    for &i in idx {
                        for (s, &gv) in gb[i * c..(i + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *s -= gv;
                        }
                    }
                }
                if needs(*rows) {
                    let gr = slot(grads, *rows, idx.len() * c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gr[k * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::SegmentMean(a, seg, inv) => {
                let c = node.value.last_dim();
                let ga = slot(grads, *a, seg.len() * c);
                for (k, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        ga[k * c + j] += inv[s] * g[s * c + j];
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                let n = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; n];
                for ((&gv, &yv), &s) in g.iter().zip(y).zip(seg) {
                    inner[s] += gv * yv;
                }
                let ga = slot(grads, *a, g.len());
                for (((sv, &gv), &yv), &s) in ga.iter_mut().zip(g).zip(y).zip(seg) {
                    *sv += yv * (gv - inner[s]);
                }
            }
            Op::SegmentWeightedSum(w, values, seg) => {
                let c = node.value.last_dim();
                if needs(*w) {
                    let vals = val(*values).data();
                    let gw = slot(grads, *w, seg.len());
                    for (k, &s) in seg.iter().enumerate() {
                        gw[k] += dot(&g[s * c..(s + 1) * c], &vals[k * c..(k + 1) * c]);
                    }
                }
                if needs(*values) {
                    let wv = val(*w).data();
                    let gv = slot(grads, *values, seg.len() * c);
                    for (k, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            gv[k * c + j] += wv[k] * g[s * c + j];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = val(*a).last_dim();
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if needs(x) {
                        let ov = val(other).data();
                        let gx = slot(grads, x, g.len() * c);
                        for (k, &gk) in g.iter().enumerate() {
                            for j in 0..c {
                                gx[k * c + j] += gk * ov[k * c + j];
                            }
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                let c = val(*a).last_dim();
                let ga = slot(grads, *a, idx.len() * c);
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[5], 3.7)).unwrap();
        let p = g.softmax(x).unwrap();
        for &v in g.value(p).data() {
            assert!(close(v, 0.2, 1e-15));
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let xt = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]).unwrap();
        let x = g.constant(xt.clone()).unwrap();
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn l2_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let s = g.l2_norm_sq(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(NumericError::NonScalarLoss(_))));
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(g.log(x), Err(NumericError::LogDomain(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(NumericError::ShapeMismatch { .. })));
        let c = g.input(Tensor::zeros(&[3])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn concat_gradient_splits_at_offsets() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.input(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn scatter_rows_routes_gradients() {
        let mut g = Graph::new();
        let base = g.input(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let rows = g.input(Tensor::matrix(1, 1, vec![10.0]).unwrap()).unwrap();
        let out = g.scatter_rows(base, &[1], rows).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 10.0, 3.0]);
        let w = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let p = g.mul(out, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(base).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert_eq!(grads.get(rows).unwrap().data(), &[2.0]);
    }

    #[test]
    fn segment_ops_forward() {
        let mut g = Graph::new();
        let s = g.input(Tensor::vector(vec![0.0, 0.0, 5.0])).unwrap();
        let p = g.segment_softmax(s, &[0, 0, 1], 3).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5, 1.0]);
        let v = g.input(Tensor::matrix(3, 1, vec![2.0, 4.0, 7.0]).unwrap()).unwrap();
        let agg = g.segment_weighted_sum(p, v, &[0, 0, 1], 3).unwrap();
        assert_eq!(g.value(agg).data(), &[3.0, 7.0, 0.0]);
        let m = g.segment_mean(v, &[2, 2, 0], 3).unwrap();
        assert_eq!(g.value(m).data(), &[7.0, 0.0, 3.0]);
    }

    #[test]
    fn no_grad_graph_records_no_requirements() {
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::scalar(2.0)).unwrap();
        let y = g.affine(x, 3.0, 1.0).unwrap();
        assert!(!g.requires_grad(y));
        assert_eq!(g.value(y).item(), 7.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-800.0, 0.0, 800.0])).unwrap();
        let y = g.log_sigmoid(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], -800.0);
        assert!(close(v[1], -std::f64::consts::LN_2, 1e-15));
        assert_eq!(v[2], 0.0);
    }
}
