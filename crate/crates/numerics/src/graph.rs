//! Recording graph: every kernel call appends a node holding its output, and
//! `backward` walks the node list in reverse to accumulate gradients.

use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        bag: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    MeanRows(NodeId),
    StdRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(NodeId, NodeId),
    CausalAttention {
        qkv: NodeId,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::StdRows(_) => "std_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_))
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Topologically ordered op records. Inputs always precede their consumers
/// because a node can only reference ids that already exist.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [n] => Ok((1, *n)),
        s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Column deviations from the column mean, computed after shifting each
/// column by its first entry so constant columns give exact zeros.
fn shifted_deviations(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..m * n).map(|i| x[i] - x[i % n]).collect();
    let mut mean = vec![0.0; n];
    for row in out.chunks(n) {
        for (o, v) in mean.iter_mut().zip(row) {
            *o += *v;
        }
    }
    for o in &mut mean {
        *o /= m as f64;
    }
    for row in out.chunks_mut(n) {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    out
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Number of non-leaf kernel invocations recorded so far.
    pub fn kernel_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    /// Kernel invocations by kind, sorted by name.
    pub fn kernel_histogram(&self) -> Vec<(&'static str, usize)> {
        let mut counts: std::collections::BTreeMap<&'static str, usize> = Default::default();
        for n in self.nodes.iter().filter(|n| !n.op.is_leaf()) {
            *counts.entry(n.op.kind()).or_default() += 1;
        }
        counts.into_iter().collect()
    }

    /// Op kind and input ids of a node, for structural inspection.
    pub fn node_inputs(&self, id: NodeId) -> (&'static str, Vec<NodeId>) {
        let op = &self.nodes[id.0].op;
        let inputs = match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatCols(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Tanh(a) | Op::Softmax(a) => vec![*a],
            Op::MeanRows(a) | Op::StdRows(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(parts) => parts.clone(),
            Op::GatherRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::CausalAttention { qkv, .. } => vec![*qkv],
        };
        (op.kind(), inputs)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.kind() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// A constant leaf; receives no gradient in the parameter view.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value)
    }

    /// Leaf bound to a store parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Ok(n);
        }
        let node = self.push(Op::Param(id), store.get(id).clone())?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    /// The store parameter a leaf node is bound to, if any.
    pub fn bound_param(&self, id: NodeId) -> Option<ParamId> {
        match self.nodes[id.0].op {
            Op::Param(pid) => Some(pid),
            _ => None,
        }
    }

    /// Whether the parameter was bound into this graph.
    pub fn touches(&self, id: ParamId) -> bool {
        self.param_nodes.contains_key(&id)
    }

    pub fn touched_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.param_nodes.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(mismatch("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(tb.data()) {
                *x += *y;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, row), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Scale(a, factor), value)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Gelu(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Tanh(a), value)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        )
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Softmax(a), value)
    }

    /// Row lookup. With `bag > 1`, output row `r` sums the rows named by
    /// `ids[r*bag .. (r+1)*bag]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], bag: usize) -> Result<NodeId> {
        let tt = self.value(table);
        let (vocab, d) = dims2("embedding", tt)?;
        if bag == 0 || ids.is_empty() || !ids.len().is_multiple_of(bag) {
            return Err(invalid(
                "embedding",
                format!("{} ids do not split into bags of {bag}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid(
                "embedding",
                format!("id {bad} out of range for table of {vocab} rows"),
            ));
        }
        let rows = ids.len() / bag;
        let mut out = vec![0.0; rows * d];
        for (r, bag_ids) in ids.chunks(bag).enumerate() {
            let orow = &mut out[r * d..(r + 1) * d];
            for &i in bag_ids {
                for (o, v) in orow.iter_mut().zip(tt.row(i)) {
                    *o += *v;
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                bag,
            },
            value,
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat_rows", "no inputs"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = dims2("concat_cols", ta)?;
        let (m2, q) = dims2("concat_cols", tb)?;
        if m != m2 {
            return Err(mismatch("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::new(vec![m, p + q], data)?;
        self.push(Op::ConcatCols(a, b), value)
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        let (rows, cols) = dims2("gather_rows", tx)?;
        if idx.is_empty() {
            return Err(invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            value,
        )
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let (m, n) = dims2("mean_rows", tx)?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += *v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let value = Tensor::new(vec![1, n], out)?;
        self.push(Op::MeanRows(x), value)
    }

    /// Population standard deviation of each column, `[m, n] -> [1, n]`.
    /// The gradient is taken as zero wherever the deviation is exactly zero.
    pub fn std_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let (m, n) = dims2("std_rows", tx)?;
        let centered = shifted_deviations(tx.data(), m, n);
        let mut var = vec![0.0; n];
        for row in centered.chunks(n) {
            for (o, v) in var.iter_mut().zip(row) {
                *o += v * v;
            }
        }
        let out = var.iter().map(|v| (v / m as f64).sqrt()).collect();
        let value = Tensor::new(vec![1, n], out)?;
        self.push(Op::StdRows(x), value)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = self.value(logits);
        let (m, v) = dims2("cross_entropy", tl)?;
        if targets.len() != m {
            return Err(invalid(
                "cross_entropy",
                format!("{m} rows of logits but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(invalid(
                "cross_entropy",
                format!("target {bad} out of range for {v} classes"),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            softmax_in_place(row);
            loss -= row[targets[r]].ln();
        }
        let value = Tensor::scalar(loss / m as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
        )
    }

    /// `(1/m) * sum_r ||pred[r] - target[r]||^2` for `[m, d]` inputs.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("mse", tp.shape(), tt.shape()));
        }
        let m = tp.rows();
        let sum: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, e)| (p - e) * (p - e))
            .sum();
        self.push(Op::Mse(pred, target), Tensor::scalar(sum / m as f64))
    }

    /// Multi-head causal self-attention over `groups` independent sequences.
    ///
    /// `qkv` is `[groups * len, 3 * d]` with query, key and value blocks side
    /// by side; the output is `[groups * len, d]`. Position `i` of a group
    /// attends to positions `0..=i` of the same group only.
    pub fn causal_attention(&mut self, qkv: NodeId, groups: usize, heads: usize) -> Result<NodeId> {
        let t = self.value(qkv);
        let (rows, c3) = dims2("causal_attention", t)?;
        if groups == 0 || rows % groups != 0 || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0
        {
            return Err(invalid(
                "causal_attention",
                format!("shape {:?} incompatible with {groups} groups and {heads} heads", t.shape()),
            ));
        }
        let len = rows / groups;
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = t.data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; groups * heads * len * len];
        let mut scores = vec![0.0; len];
        for g in 0..groups {
            for h in 0..heads {
                let pbase = (g * heads + h) * len * len;
                for i in 0..len {
                    let qi = &x[(g * len + i) * c3 + h * dh..][..dh];
                    for j in 0..=i {
                        let kj = &x[(g * len + j) * c3 + d + h * dh..][..dh];
                        scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let orow = &mut out[(g * len + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j];
                        probs[pbase + i * len + j] = p;
                        let vj = &x[(g * len + j) * c3 + 2 * d + h * dh..][..dh];
                        for (o, v) in orow.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.push(
            Op::CausalAttention {
                qkv,
                groups,
                heads,
                probs,
            },
            value,
        )
    }

    /// Reverse-mode sweep from a scalar node; returns one gradient buffer per
    /// node (`None` where no gradient flowed).
    pub fn backward_nodes(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(grads)
    }

    /// Gradients of `loss` for every parameter in `store`; parameters not
    /// reached from the loss get zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out = Gradients::zeros_like(store);
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = &node_grads[nid.0] {
                if pid.0 < out.len() {
                    out.get_mut(pid).data_mut().copy_from_slice(g);
                }
            }
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                {
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let gb = acc(grads, *b, k * n);
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (g, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *g += av * x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    let g = acc(grads, id, gout.len());
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += *y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                {
                    let g = acc(grads, *a, gout.len());
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += *y;
                    }
                }
                let n = self.value(*row).numel();
                let g = acc(grads, *row, n);
                for chunk in gout.chunks(n) {
                    for (x, y) in g.iter_mut().zip(chunk) {
                        *x += *y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                {
                    let g = acc(grads, *a, gout.len());
                    for ((x, y), bv) in g.iter_mut().zip(gout).zip(tb) {
                        *x += y * bv;
                    }
                }
                let g = acc(grads, *b, gout.len());
                for ((x, y), av) in g.iter_mut().zip(gout).zip(ta) {
                    *x += y * av;
                }
            }
            Op::Scale(a, f) => {
                let g = acc(grads, *a, gout.len());
                for (x, y) in g.iter_mut().zip(gout) {
                    *x += y * f;
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                let g = acc(grads, *a, gout.len());
                for ((x, y), v) in g.iter_mut().zip(gout).zip(ta) {
                    *x += y * gelu_grad(*v);
                }
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                let g = acc(grads, *a, gout.len());
                for ((x, y), t) in g.iter_mut().zip(gout).zip(out) {
                    *x += y * (1.0 - t * t);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let gvals = self.value(*gamma).data().to_vec();
                {
                    let gg = acc(grads, *gamma, n);
                    for (r, chunk) in gout.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += chunk[j] * xhat[r * n + j];
                        }
                    }
                }
                {
                    let gb = acc(grads, *beta, n);
                    for chunk in gout.chunks(n) {
                        for (x, y) in gb.iter_mut().zip(chunk) {
                            *x += *y;
                        }
                    }
                }
                let gx = acc(grads, *x, gout.len());
                let mut dxhat = vec![0.0; n];
                for (r, chunk) in gout.chunks(n).enumerate() {
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        dxhat[j] = chunk[j] * gvals[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * h[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        gx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                }
            }
            Op::Softmax(a) => {
                let out = node.value.data();
                let n = node.value.cols();
                let g = acc(grads, *a, gout.len());
                for ((gr, yr), pr) in g.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = yr.iter().zip(pr).map(|(y, p)| y * p).sum();
                    for j in 0..n {
                        gr[j] += pr[j] * (yr[j] - dot);
                    }
                }
            }
            Op::Embedding { table, ids, bag } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let g = acc(grads, *table, tt.numel());
                for (r, bag_ids) in ids.chunks(*bag).enumerate() {
                    let grow = &gout[r * d..(r + 1) * d];
                    for &i in bag_ids {
                        for (x, y) in g[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *x += *y;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let g = acc(grads, p, n);
                    for (x, y) in g.iter_mut().zip(&gout[off..off + n]) {
                        *x += *y;
                    }
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let m = self.value(*a).rows();
                {
                    let ga = acc(grads, *a, m * p);
                    for r in 0..m {
                        for j in 0..p {
                            ga[r * p + j] += gout[r * (p + q) + j];
                        }
                    }
                }
                let gb = acc(grads, *b, m * q);
                for r in 0..m {
                    for j in 0..q {
                        gb[r * q + j] += gout[r * (p + q) + p + j];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let g = acc(grads, *x, tx.numel());
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in g[i * c..(i + 1) * c].iter_mut().zip(&gout[r * c..(r + 1) * c]) {
                        *a += *b;
                    }
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let g = acc(grads, *x, tx.numel());
                for r in 0..m {
                    for j in 0..n {
                        g[r * n + j] += gout[j] / m as f64;
                    }
                }
            }
            Op::StdRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                let centered = shifted_deviations(tx.data(), m, n);
                let std = node.value.data();
                let g = acc(grads, *x, tx.numel());
                for r in 0..m {
                    for j in 0..n {
                        if std[j] > 0.0 {
                            g[r * n + j] += gout[j] * centered[r * n + j] / (m as f64 * std[j]);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let m = targets.len();
                let scale = gout[0] / m as f64;
                let g = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        g[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
            Op::Mse(p, e) => {
                let (tp, te) = (self.value(*p), self.value(*e));
                let m = tp.rows() as f64;
                let factor = 2.0 * gout[0] / m;
                let diff: Vec<f64> = tp.data().iter().zip(te.data()).map(|(a, b)| a - b).collect();
                {
                    let g = acc(grads, *p, diff.len());
                    for (x, dv) in g.iter_mut().zip(&diff) {
                        *x += factor * dv;
                    }
                }
                let g = acc(grads, *e, diff.len());
                for (x, dv) in g.iter_mut().zip(&diff) {
                    *x -= factor * dv;
                }
            }
            Op::CausalAttention {
                qkv,
                groups,
                heads,
                probs,
            } => {
                let t = self.value(*qkv);
                let (rows, c3) = (t.rows(), t.cols());
                let (groups, heads) = (*groups, *heads);
                let len = rows / groups;
                let d = c3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = t.data();
                let g = acc(grads, *qkv, rows * c3);
                let mut dp = vec![0.0; len];
                for gi in 0..groups {
                    for h in 0..heads {
                        let pbase = (gi * heads + h) * len * len;
                        for i in 0..len {
                            let go = &gout[(gi * len + i) * d + h * dh..][..dh];
                            let qoff = (gi * len + i) * c3 + h * dh;
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let voff = (gi * len + j) * c3 + 2 * d + h * dh;
                                let p = probs[pbase + i * len + j];
                                let vj = &x[voff..voff + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += p * dp[j];
                                for (gv, gov) in g[voff..voff + dh].iter_mut().zip(go) {
                                    *gv += p * gov;
                                }
                            }
                            for j in 0..=i {
                                let p = probs[pbase + i * len + j];
                                let ds = p * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (gi * len + j) * c3 + d + h * dh;
                                for c in 0..dh {
                                    g[qoff + c] += ds * x[koff + c];
                                    g[koff + c] += ds * x[qoff + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
