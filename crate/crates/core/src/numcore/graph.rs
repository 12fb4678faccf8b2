//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! created in topological order, so `backward` is a single reverse sweep.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw};
use super::{ParamGrads, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Allowed-entry flags for softmax. Either one flag per column (shared by
/// every row) or one flag per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_allowed(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }

    /// All `n` entries allowed except `hidden`.
    pub fn hiding(n: usize, hidden: &[usize]) -> Self {
        let mut allowed = vec![true; n];
        for &h in hidden {
            if h < n {
                allowed[h] = false;
            }
        }
        Self { allowed }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, row: usize, col: usize, cols: usize) -> bool {
        if self.allowed.len() == cols {
            self.allowed[col]
        } else {
            self.allowed[row * cols + col]
        }
    }

    fn check(&self, x: &Tensor) -> Result<(), TensorError> {
        let cols = x.cols();
        if self.allowed.len() != cols && self.allowed.len() != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                left: x.shape().to_vec(),
                right: vec![self.allowed.len()],
            });
        }
        for r in 0..x.rows() {
            if !(0..cols).any(|c| self.is_allowed(r, c, cols)) {
                return Err(TensorError::AllMasked);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Mask>),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Vec<Var>, Axis),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    Dropout(Var, Vec<f64>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// A recorded computation. Parameters are borrowed from a [`ParamStore`] and
/// enter the tape once, on first use.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), dropout_rng: None }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn train_mode(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.store.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Some(t), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let requires_grad = store.is_trainable(id);
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::raw(shape, data), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).transposed();
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), t, rg, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch { op, left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), t, rg, "add")
    }

    /// `x (m x n) + bias (n)` with the bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(TensorError::ShapeMismatch { op: "add_row", left: tx.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let n = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % n]).collect();
        let t = Tensor::raw(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push(Op::AddRow(x, bias), t, rg, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), t, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), t, rg, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(Op::Tanh(a), t, rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), t, rg, "relu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(Op::Log(a), t, rg, "log")
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if let Some(m) = &mask {
            m.check(tx)?;
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m.is_allowed(r, c, cols));
            let max = (0..cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in (0..cols).filter(|&c| allowed(c)) {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= z;
            }
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), t, rg, "softmax")
    }

    /// Row-wise log-softmax. Masked positions hold 0 and carry no gradient;
    /// callers must not read them as log-probabilities.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if let Some(m) = &mask {
            m.check(tx)?;
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m.is_allowed(r, c, cols));
            let max = (0..cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..cols).filter(|&c| allowed(c)).map(|c| (row[c] - max).exp()).sum();
            let lse = max + z.ln();
            for c in (0..cols).filter(|&c| allowed(c)) {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(Op::LogSoftmax(x, mask), t, rg, "log_softmax")
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, ts) = (self.value(x), self.value(gain), self.value(shift));
        let d = tx.cols();
        if d < 2 {
            return Err(TensorError::InvalidShape { shape: tx.shape().to_vec(), len: tx.len() });
        }
        if tg.len() != d || ts.len() != d {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", left: tx.shape().to_vec(), right: tg.shape().to_vec() });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[r * d + c] = xh;
                out[r * d + c] = tg.data()[c] * xh + ts.data()[c];
            }
        }
        let t = Tensor::raw(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, shift]);
        self.push(Op::LayerNorm { x, gain, shift, xhat, inv_std }, t, rg, "layer_norm")
    }

    /// Concatenation. Rank-1 inputs concatenate end to end along either axis.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidShape { shape: vec![], len: 0 })?;
        let all_rank1 = parts.iter().all(|&p| self.value(p).rank() == 1);
        let t = if all_rank1 {
            let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
            Tensor::raw(vec![data.len()], data)
        } else {
            match axis {
                Axis::Rows => {
                    let cols = self.value(first).cols();
                    let mut data = Vec::new();
                    for &p in parts {
                        let tp = self.value(p);
                        if tp.cols() != cols {
                            return Err(TensorError::ShapeMismatch { op: "concat", left: self.value(first).shape().to_vec(), right: tp.shape().to_vec() });
                        }
                        data.extend_from_slice(tp.data());
                    }
                    Tensor::raw(vec![data.len() / cols, cols], data)
                }
                Axis::Cols => {
                    let rows = self.value(first).rows();
                    let mut total = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        if tp.rows() != rows {
                            return Err(TensorError::ShapeMismatch { op: "concat", left: self.value(first).shape().to_vec(), right: tp.shape().to_vec() });
                        }
                        total += tp.cols();
                    }
                    let mut data = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for &p in parts {
                            data.extend_from_slice(self.value(p).row(r));
                        }
                    }
                    Tensor::raw(vec![rows, total], data)
                }
            }
        };
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec(), axis), t, rg, "concat")
    }

    /// Rows of `table` selected by `indices`, as an `indices.len() x cols` matrix.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (rows, cols) = (tt.rows(), tt.cols());
        if indices.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0, cols], len: 0 });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: rows });
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::raw(vec![indices.len(), cols], data);
        let rg = self.rg(&[table]);
        self.push(Op::Gather(table, indices.to_vec()), t, rg, "gather_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if len == 0 || start + len > tx.rows() {
            return Err(TensorError::IndexOutOfRange { op: "slice_rows", index: start + len, len: tx.rows() });
        }
        let cols = tx.cols();
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::raw(vec![len, cols], data);
        let rg = self.rg(&[x]);
        self.push(Op::SliceRows(x, start), t, rg, "slice_rows")
    }

    /// Inverted dropout. Identity outside training mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, TensorError> {
        if rate <= 0.0 || self.dropout_rng.is_none() {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::raw(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(Op::Dropout(x, mask), t, rg, "dropout")
    }

    /// Entries at flat `indices`, as a rank-1 tensor.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if indices.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0], len: 0 });
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= tx.len() {
                return Err(TensorError::IndexOutOfRange { op: "pick", index: i, len: tx.len() });
            }
            data.push(tx.data()[i]);
        }
        let t = Tensor::raw(vec![indices.len()], data);
        let rg = self.rg(&[x]);
        self.push(Op::Pick(x, indices.to_vec()), t, rg, "pick")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), t, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / tx.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), t, rg, "mean")
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let da = matmul_bt_raw(dy.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::raw(ta.shape().to_vec(), da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_at_raw(ta.data(), dy.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::raw(tb.shape().to_vec(), db));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, dy.transposed().reshape(self.value(*a).shape().to_vec()).expect("same size")),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.requires_grad(*bias) {
                    let n = dy.cols();
                    let mut db = vec![0.0; n];
                    for (j, v) in dy.data().iter().enumerate() {
                        db[j % n] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::raw(self.value(*bias).shape().to_vec(), db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, Tensor::raw(ta.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, Tensor::raw(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.map(|g| g * s)),
            Op::Tanh(a) => {
                let d = dy.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor::raw(y.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = dy.data().iter().zip(x.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::raw(y.shape().to_vec(), d));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = dy.data().iter().zip(x.data()).map(|(g, v)| g / v).collect();
                self.accumulate(grads, *a, Tensor::raw(y.shape().to_vec(), d));
            }
            Op::Softmax(x) => {
                let (rows, cols) = (y.rows(), y.cols());
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::raw(y.shape().to_vec(), d));
            }
            Op::LogSoftmax(x, mask) => {
                let (rows, cols) = (y.rows(), y.cols());
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let allowed = |c: usize| mask.as_ref().is_none_or(|m| m.is_allowed(r, c, cols));
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let gsum: f64 = (0..cols).filter(|&c| allowed(c)).map(|c| gr[c]).sum();
                    for c in (0..cols).filter(|&c| allowed(c)) {
                        d[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::raw(y.shape().to_vec(), d));
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let tg = self.value(*gain);
                let (rows, d) = (y.rows(), y.cols());
                if self.requires_grad(*gain) || self.requires_grad(*shift) {
                    let mut dg = vec![0.0; d];
                    let mut ds = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += dy.data()[r * d + c] * xhat[r * d + c];
                            ds[c] += dy.data()[r * d + c];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::raw(tg.shape().to_vec(), dg));
                    self.accumulate(grads, *shift, Tensor::raw(self.value(*shift).shape().to_vec(), ds));
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            let dxh = dy.data()[r * d + c] * tg.data()[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + c];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for c in 0..d {
                            let dxh = dy.data()[r * d + c] * tg.data()[c];
                            dx[r * d + c] = inv_std[r] * (dxh - mean_dxh - xhat[r * d + c] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::raw(y.shape().to_vec(), dx));
                }
            }
            Op::Concat(parts, axis) => {
                let all_rank1 = parts.iter().all(|&p| self.value(p).rank() == 1);
                if all_rank1 || *axis == Axis::Rows {
                    let mut offset = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let g = dy.data()[offset..offset + tp.len()].to_vec();
                        offset += tp.len();
                        self.accumulate(grads, p, Tensor::raw(tp.shape().to_vec(), g));
                    }
                } else {
                    let (rows, total) = (dy.rows(), dy.cols());
                    let mut col0 = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let c = tp.cols();
                        if self.requires_grad(p) {
                            let mut g = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                g.extend_from_slice(&dy.data()[r * total + col0..r * total + col0 + c]);
                            }
                            self.accumulate(grads, p, Tensor::raw(tp.shape().to_vec(), g));
                        }
                        col0 += c;
                    }
                }
            }
            Op::Gather(table, indices) => {
                if self.requires_grad(*table) {
                    let tt = self.value(*table);
                    let cols = tt.cols();
                    let mut g = vec![0.0; tt.len()];
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            g[i * cols + c] += dy.data()[k * cols + c];
                        }
                    }
                    self.accumulate(grads, *table, Tensor::raw(tt.shape().to_vec(), g));
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut g = vec![0.0; tx.len()];
                g[start * cols..start * cols + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, Tensor::raw(tx.shape().to_vec(), g));
            }
            Op::Dropout(x, mask) => {
                let d = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::raw(y.shape().to_vec(), d));
            }
            Op::Pick(x, indices) => {
                let tx = self.value(*x);
                let mut g = vec![0.0; tx.len()];
                for (k, &i) in indices.iter().enumerate() {
                    g[i] += dy.data()[k];
                }
                self.accumulate(grads, *x, Tensor::raw(tx.shape().to_vec(), g));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), dy.item()));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), dy.item() / tx.len() as f64));
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if it was reached by the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects the gradients of every trainable parameter used in `graph`.
    pub fn params(&self, graph: &Graph<'_>) -> ParamGrads {
        let n = graph.store.map_or(0, ParamStore::len);
        let mut out = ParamGrads::new(n);
        for (&id, &v) in &graph.param_vars {
            if let Some(g) = self.wrt(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}
