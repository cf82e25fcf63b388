//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass: leaves are registered
//! first, ops append nodes in topological order, and [`Graph::backward`]
//! walks the tape once in reverse. Gradients accumulate only into nodes
//! reachable from a `requires_grad` leaf.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Transpose { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { x: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    Sum { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>> },
    KlVsTeacher { student: NodeId, teacher: NodeId, active: Vec<bool>, temp: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; every input id precedes its consumer.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Gradients flow back to it when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            tensor.shape.clone(),
            tensor.data.clone(),
            tensor.requires_grad,
        )
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, false)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        let s = &self.node(id).shape;
        if s.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "expected 2-D node, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Add { a, b }, shape, data, rg))
    }

    /// Broadcast `bias` (length = last dimension) over every row of `x`.
    /// The only broadcasting this engine supports.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let last = *self.node(x).shape.last().unwrap();
        if self.node(bias).shape != [last] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(bias).shape.clone(),
            });
        }
        let b = &self.node(bias).data;
        let data: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % last])
            .collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(Op::AddBias { x, bias }, shape, data, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Mul { a, b }, shape, data, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|v| v * c).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(Op::Scale { x, c }, shape, data, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x)?;
        let data = transpose_raw(&self.node(x).data, r, c);
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Transpose { x }, vec![c, r], data, rg))
    }

    /// Softmax along `axis`, computed with max-subtraction. Each slice
    /// along the axis sums to 1.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.node(x).shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let xs = &self.node(x).data;
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * axis_len * inner + a * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(xs[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..axis_len {
                    let e = (xs[at(a)] - max).exp();
                    data[at(a)] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    data[at(a)] /= sum;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Softmax { x, axis }, shape, data, rg))
    }

    /// Layer normalization over the last dimension with learned affine
    /// parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.node(x).shape.clone();
        let d = *shape.last().unwrap();
        if self.node(gamma).shape != [d] || self.node(beta).shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.node(gamma).shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::InvalidInput("layer_norm eps must be > 0".into()));
        }
        let xs = &self.node(x).data;
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut data = vec![0.0; xs.len()];
        for (row, out) in xs.chunks(d).zip(data.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, self.nodes[x.0].shape.clone(), data, rg))
    }

    /// Tanh-approximation GELU, elementwise.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let data: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(Op::Gelu { x }, shape, data, rg)
    }

    /// Row lookup: output row r is `table` row `ids[r]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let t = &self.node(table).data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let rg = self.node(table).requires_grad;
        Ok(self.push(
            Op::Gather { table, ids: ids.to_vec() },
            vec![ids.len(), cols],
            data,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > cols || len == 0 {
            return Err(Error::InvalidInput(format!(
                "slice_cols [{start}, {}) out of range for {cols} columns",
                start + len
            )));
        }
        let xs = &self.node(x).data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceCols { x, start, len }, vec![rows, len], data, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.dims2(parts[0])?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.node(p).shape[1];
                data.extend_from_slice(&self.node(p).data[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, total], data, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.dims2(parts[0])?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, cols], data, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(Op::Sum { x }, vec![1], vec![s], rg)
    }

    /// Mean negative log-softmax over rows whose target is not the ignore
    /// index. An empty non-ignored set yields zero loss and zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<NodeId> {
        let (rows, cols) = self.dims2(logits)?;
        if targets.len() != rows {
            return Err(Error::InvalidInput(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let mut opts = Vec::with_capacity(rows);
        for &t in targets {
            if Some(t) == ignore_index {
                opts.push(None);
            } else if t >= cols {
                return Err(Error::InvalidInput(format!(
                    "cross_entropy: target {t} out of range for {cols} classes"
                )));
            } else {
                opts.push(Some(t));
            }
        }
        let xs = &self.node(logits).data;
        let mut loss = 0.0;
        let mut count = 0usize;
        let mut scratch = vec![0.0; cols];
        for (row, t) in xs.chunks(cols).zip(&opts) {
            if let Some(t) = t {
                log_softmax_row(row, &mut scratch);
                loss -= scratch[*t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.node(logits).requires_grad;
        Ok(self.push(Op::CrossEntropy { logits, targets: opts }, vec![1], vec![loss], rg))
    }

    /// Mean KL divergence from the tempered teacher distribution to the
    /// tempered student distribution, over active rows:
    /// `mean_r KL(softmax(teacher_r / T) || softmax(student_r / T))`.
    /// The teacher node carries no gradient.
    pub fn kl_vs_teacher(
        &mut self,
        student: NodeId,
        teacher: NodeId,
        active: &[bool],
        temp: f64,
    ) -> Result<NodeId> {
        let (rows, cols) = self.dims2(student)?;
        if self.node(teacher).shape != self.node(student).shape {
            return Err(Error::ShapeMismatch {
                op: "kl_vs_teacher",
                lhs: self.node(student).shape.clone(),
                rhs: self.node(teacher).shape.clone(),
            });
        }
        if active.len() != rows {
            return Err(Error::InvalidInput(format!(
                "kl_vs_teacher: {} row flags for {} rows",
                active.len(),
                rows
            )));
        }
        if temp <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        let s = &self.node(student).data;
        let t = &self.node(teacher).data;
        let mut logp = vec![0.0; cols];
        let mut logq = vec![0.0; cols];
        let mut srow = vec![0.0; cols];
        let mut trow = vec![0.0; cols];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            for c in 0..cols {
                srow[c] = s[r * cols + c] / temp;
                trow[c] = t[r * cols + c] / temp;
            }
            log_softmax_row(&trow, &mut logp);
            log_softmax_row(&srow, &mut logq);
            for c in 0..cols {
                total += logp[c].exp() * (logp[c] - logq[c]);
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.node(student).requires_grad;
        Ok(self.push(
            Op::KlVsTeacher { student, teacher, active: active.to_vec(), temp },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients of `loss` with respect to every `requires_grad`
    /// node. `loss` must be a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward target must be scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        // Every requires_grad leaf ends up with a populated gradient, even
        // when nothing flows back to it (e.g. a fully ignored loss).
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                *grad = Some(vec![0.0; node.data.len()]);
            }
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.step_backward(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].data.len();
        let g = self.grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        update(g);
    }

    fn step_backward(&mut self, i: usize, grad: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                let n = self.node(b).shape[1];
                if self.node(a).requires_grad {
                    let bt = transpose_raw(&self.node(b).data, k, n);
                    let da = matmul_raw(grad, &bt, m, n, k);
                    self.accumulate(a, |g| add_into(g, &da));
                }
                if self.node(b).requires_grad {
                    let at = transpose_raw(&self.node(a).data, m, k);
                    let db = matmul_raw(&at, grad, k, m, n);
                    self.accumulate(b, |g| add_into(g, &db));
                }
            }

            Op::Add { a, b } => {
                self.accumulate(a, |g| add_into(g, grad));
                self.accumulate(b, |g| add_into(g, grad));
            }

            Op::AddBias { x, bias } => {
                self.accumulate(x, |g| add_into(g, grad));
                let last = self.node(bias).data.len();
                self.accumulate(bias, |g| {
                    for (i, &v) in grad.iter().enumerate() {
                        g[i % last] += v;
                    }
                });
            }

            Op::Mul { a, b } => {
                if self.node(a).requires_grad {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.node(b).data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(a, |g| add_into(g, &da));
                }
                if self.node(b).requires_grad {
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.node(a).data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(b, |g| add_into(g, &db));
                }
            }

            Op::Scale { x, c } => {
                self.accumulate(x, |g| {
                    for (gi, &v) in g.iter_mut().zip(grad) {
                        *gi += c * v;
                    }
                });
            }

            Op::Transpose { x } => {
                let (r, c) = (self.node(i_id(i)).shape[0], self.node(i_id(i)).shape[1]);
                let dx = transpose_raw(grad, r, c);
                self.accumulate(x, |g| add_into(g, &dx));
            }

            Op::Softmax { x, axis } => {
                let shape = self.nodes[i].shape.clone();
                let out = &self.nodes[i].data;
                let axis_len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |a: usize| o * axis_len * inner + a * inner + ii;
                        let mut dot = 0.0;
                        for a in 0..axis_len {
                            dot += grad[at(a)] * out[at(a)];
                        }
                        for a in 0..axis_len {
                            dx[at(a)] = out[at(a)] * (grad[at(a)] - dot);
                        }
                    }
                }
                self.accumulate(x, |g| add_into(g, &dx));
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.node(gamma).data.len();
                let xs = self.node(x).data.clone();
                let gm = self.node(gamma).data.clone();
                let rows = xs.len() / d;
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let go = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += go[j] * xhat[j];
                        dbeta[j] += go[j];
                        dxhat[j] = go[j] * gm[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(x, |g| add_into(g, &dx));
                self.accumulate(gamma, |g| add_into(g, &dgamma));
                self.accumulate(beta, |g| add_into(g, &dbeta));
            }

            Op::Gelu { x } => {
                const C: f64 = 0.7978845608028654;
                let dx: Vec<f64> = self
                    .node(x)
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| {
                        let inner = C * (v + 0.044715 * v * v * v);
                        let t = inner.tanh();
                        let sech2 = 1.0 - t * t;
                        let d_inner = C * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner)
                    })
                    .collect();
                self.accumulate(x, |g| add_into(g, &dx));
            }

            Op::Gather { table, ids } => {
                let cols = self.node(table).shape[1];
                self.accumulate(table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            g[id * cols + c] += grad[r * cols + c];
                        }
                    }
                });
            }

            Op::SliceCols { x, start, len } => {
                let cols = self.node(x).shape[1];
                let rows = self.node(x).shape[0];
                self.accumulate(x, |g| {
                    for r in 0..rows {
                        for j in 0..len {
                            g[r * cols + start + j] += grad[r * len + j];
                        }
                    }
                });
            }

            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut off = 0;
                for &p in &parts {
                    let c = self.node(p).shape[1];
                    let start = off;
                    self.accumulate(p, |g| {
                        for r in 0..rows {
                            for j in 0..c {
                                g[r * c + j] += grad[r * total + start + j];
                            }
                        }
                    });
                    off += c;
                }
            }

            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in &parts {
                    let len = self.node(p).data.len();
                    let start = off;
                    self.accumulate(p, |g| add_into(g, &grad[start..start + len]));
                    off += len;
                }
            }

            Op::Sum { x } => {
                let g0 = grad[0];
                self.accumulate(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                });
            }

            Op::CrossEntropy { logits, targets } => {
                let cols = self.node(logits).shape[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let xs = self.node(logits).data.clone();
                let g0 = grad[0];
                let mut scratch = vec![0.0; cols];
                self.accumulate(logits, |g| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &xs[r * cols..(r + 1) * cols];
                        log_softmax_row(row, &mut scratch);
                        for c in 0..cols {
                            let softmax = scratch[c].exp();
                            let onehot = if c == *t { 1.0 } else { 0.0 };
                            g[r * cols + c] += g0 * (softmax - onehot) / count as f64;
                        }
                    }
                });
            }

            Op::KlVsTeacher { student, teacher, active, temp } => {
                let cols = self.node(student).shape[1];
                let count = active.iter().filter(|a| **a).count();
                if count == 0 {
                    return;
                }
                let s = self.node(student).data.clone();
                let t = self.node(teacher).data.clone();
                let g0 = grad[0];
                let mut logp = vec![0.0; cols];
                let mut logq = vec![0.0; cols];
                let mut srow = vec![0.0; cols];
                let mut trow = vec![0.0; cols];
                self.accumulate(student, |g| {
                    for (r, act) in active.iter().enumerate() {
                        if !act {
                            continue;
                        }
                        for c in 0..cols {
                            srow[c] = s[r * cols + c] / temp;
                            trow[c] = t[r * cols + c] / temp;
                        }
                        log_softmax_row(&trow, &mut logp);
                        log_softmax_row(&srow, &mut logq);
                        for c in 0..cols {
                            let q = logq[c].exp();
                            let p = logp[c].exp();
                            g[r * cols + c] += g0 * (q - p) / (temp * count as f64);
                        }
                    }
                });
            }
        }
    }
}

fn i_id(i: usize) -> NodeId {
    NodeId(i)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
