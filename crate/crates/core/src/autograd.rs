//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its value, and records which nodes produced it. Because nodes are
//! only ever appended, creation order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! A node requires a gradient iff it is a leaf created with
//! `requires_grad = true` or any of its inputs requires one; everything
//! else is skipped during the backward sweep, which keeps frozen
//! sub-networks cheap.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Array2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per column.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Second operand may be a `1 x cols` row broadcast over the first.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    RowSoftmax(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
    },
    GatherRows {
        input: NodeId,
        index: Arc<[usize]>,
    },
    ScatterAddRows {
        input: NodeId,
        index: Arc<[usize]>,
    },
    Transpose(NodeId),
    Sum(NodeId),
    SmoothL1 {
        input: NodeId,
        target: Array2,
        beta: f64,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Array2,
        inv_std: Vec<f64>,
    },
    /// Per-column affine normalization with fixed statistics (evaluation-mode batch norm).
    FixedNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Array2,
        inv_std: Vec<f64>,
    },
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        normalized: Array2,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Array2,
    op: Op,
    requires_grad: bool,
}

/// Accumulated gradients of the leaves of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Array2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `id`, or `None` if no path connects it to the loss.
    pub fn get(&self, id: NodeId) -> Option<&Array2> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zero-filled when the node is unreachable.
    pub fn get_or_zeros(&self, id: NodeId) -> Array2 {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Array2::zeros(r, c)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, returning `x` itself once `e^-x` is negligible.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2 {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array2, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array2) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array2) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Array2, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may also be a `1 x cols` row added to every row of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if sa == sb {
            self.value(a).zip_map(self.value(b), |x, y| x + y)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let mut v = self.value(a).clone();
            let bias = self.value(b).row(0).to_vec();
            for r in 0..sa.0 {
                for (x, y) in v.row_mut(r).iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            v
        } else {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("sub", format!("{sa:?} - {sb:?}")));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("elementwise-mul", format!("{sa:?} * {sb:?}")));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Softmax along each row, with the row maximum subtracted first.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a), None);
        self.push(value, Op::RowSoftmax(a), &[a])
    }

    /// Row softmax restricted to the entries where `mask` is `true`; masked
    /// entries come out as exactly zero. Every row needs one allowed entry.
    pub fn masked_row_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::shape(
                "row-softmax",
                format!("mask of length {} for a {r}x{c} input", mask.len()),
            ));
        }
        let value = softmax_rows(self.value(a), Some(mask));
        Ok(self.push(value, Op::RowSoftmax(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat-cols", "no inputs"));
        };
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return Err(Error::shape(
                "concat-cols",
                format!("row counts {rows} and {}", self.shape(*bad).0),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Array2::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let part = self.value(p);
            let pc = part.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pc].copy_from_slice(part.row(r));
            }
            offset += pc;
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.1 {
            return Err(Error::shape(
                "slice-cols",
                format!("columns {start}..{} of {s:?}", start + len),
            ));
        }
        let value = self.value(a).slice_cols(start, len);
        Ok(self.push(value, Op::SliceCols { input: a, start }, &[a]))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId> {
        let s = self.shape(a);
        if let Some(bad) = index.iter().find(|&&i| i >= s.0) {
            return Err(Error::shape("gather-rows", format!("row {bad} of {s:?}")));
        }
        let value = self.value(a).gather_rows(&index);
        Ok(self.push(value, Op::GatherRows { input: a, index }, &[a]))
    }

    /// Sums row `i` of `a` into output row `index[i]`; the output has `rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: NodeId,
        index: Arc<[usize]>,
        rows: usize,
    ) -> Result<NodeId> {
        let s = self.shape(a);
        if index.len() != s.0 {
            return Err(Error::shape(
                "scatter-add-rows",
                format!("{} indices for {s:?}", index.len()),
            ));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "scatter-add-rows",
                format!("target row {bad} of {rows}"),
            ));
        }
        let mut value = Array2::zeros(rows, s.1);
        let src = self.value(a);
        for (i, &dst) in index.iter().enumerate() {
            for (o, v) in value.row_mut(dst).iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(value, Op::ScatterAddRows { input: a, index }, &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Array2::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean over all entries of the elementwise smooth-L1 (Huber) penalty
    /// between `a` and a constant target.
    pub fn smooth_l1(&mut self, a: NodeId, target: &Array2, beta: f64) -> Result<NodeId> {
        let s = self.shape(a);
        if s != target.shape() {
            return Err(Error::shape(
                "smooth-l1",
                format!("{s:?} vs target {:?}", target.shape()),
            ));
        }
        let value = Array2::scalar(smooth_l1_mean(self.value(a), target, beta));
        Ok(self.push(
            value,
            Op::SmoothL1 {
                input: a,
                target: target.clone(),
                beta,
            },
            &[a],
        ))
    }

    /// Batch normalization over rows using the batch's own statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let (n, c) = self.shape(x);
        self.check_affine("batch-norm", c, gamma, beta)?;
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if n > 0 {
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for r in 0..n {
                for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let normalized = column_normalize(xv, &mean, &inv_std);
        let value = column_affine(&normalized, self.value(gamma), self.value(beta));
        let id = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((
            id,
            BatchStats {
                mean,
                var,
                count: n,
            },
        ))
    }

    /// Per-column normalization with externally supplied mean and variance.
    pub fn fixed_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let c = self.shape(x).1;
        self.check_affine("batch-norm", c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch-norm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let normalized = column_normalize(self.value(x), mean, &inv_std);
        let value = column_affine(&normalized, self.value(gamma), self.value(beta));
        Ok(self.push(
            value,
            Op::FixedNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalization: each row's channels are split into `groups`
    /// contiguous groups, each normalized to zero mean and unit variance.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c) = self.shape(x);
        self.check_affine("group-norm", c, gamma, beta)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group-norm",
                format!("{c} channels in {groups} groups"),
            ));
        }
        let width = c / groups;
        let xv = self.value(x);
        let mut normalized = Array2::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n * groups);
        for r in 0..n {
            let row = xv.row(r);
            for g in 0..groups {
                let chunk = &row[g * width..(g + 1) * width];
                let mean = chunk.iter().sum::<f64>() / width as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (o, v) in normalized.row_mut(r)[g * width..(g + 1) * width]
                    .iter_mut()
                    .zip(chunk)
                {
                    *o = (v - mean) * is;
                }
            }
        }
        let value = column_affine(&normalized, self.value(gamma), self.value(beta));
        Ok(self.push(
            value,
            Op::GroupNorm {
                input: x,
                gamma,
                beta,
                groups,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_affine(&self, op: &str, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        for (name, id) in [("scale", gamma), ("shift", beta)] {
            if self.shape(id) != (1, c) {
                return Err(Error::shape(
                    op,
                    format!("{name} {:?} for {c} channels", self.shape(id)),
                ));
            }
        }
        Ok(())
    }

    /// Propagates gradients from the scalar `loss` back to every leaf that
    /// requires one. Contributions from repeated uses of a node are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {s:?}"),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Array2::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Array2>], id: NodeId, delta: Array2) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Array2, grads: &mut [Option<Array2>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let d = g.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = self.value(*a).t_matmul(g);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let d = if self.shape(*b) == g.shape() {
                        g.clone()
                    } else {
                        g.sum_rows()
                    };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |u, v| u * v));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |u, v| u * v));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |u, s| u * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |u, t| u * (1.0 - t * t))),
            Op::Softplus(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |u, x| u * sigmoid(x)))
            }
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |u, x| if x > 0.0 { u } else { 0.0 }),
            ),
            Op::RowSoftmax(a) => {
                let mut d = Array2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, pc));
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { input, start } => {
                let (r, c) = self.shape(*input);
                let mut d = Array2::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *input, d);
            }
            Op::GatherRows { input, index } => {
                let (r, c) = self.shape(*input);
                let mut d = Array2::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    for (o, v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::ScatterAddRows { input, index } => {
                self.accumulate(grads, *input, g.gather_rows(index));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Array2::filled(r, c, g.item()));
            }
            Op::SmoothL1 {
                input,
                target,
                beta,
            } => {
                let x = self.value(*input);
                let scale = g.item() / x.len().max(1) as f64;
                let d = x.zip_map(target, |p, t| {
                    let e = p - t;
                    let de = if e.abs() < *beta {
                        e / beta
                    } else {
                        e.signum()
                    };
                    de * scale
                });
                self.accumulate(grads, *input, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (dgamma, dbeta) = affine_param_grads(g, normalized);
                let gam = self.value(*gamma).row(0);
                if self.wants(*input) {
                    let (n, c) = g.shape();
                    let nf = n as f64;
                    let mut d = Array2::zeros(n, c);
                    for col in 0..c {
                        let k = gam[col] * inv_std[col] / nf;
                        for r in 0..n {
                            let v = nf * g.get(r, col)
                                - dbeta.get(0, col)
                                - normalized.get(r, col) * dgamma.get(0, col);
                            d.set(r, col, k * v);
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::FixedNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (dgamma, dbeta) = affine_param_grads(g, normalized);
                if self.wants(*input) {
                    let gam = self.value(*gamma).row(0);
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (col, v) in d.row_mut(r).iter_mut().enumerate() {
                            *v *= gam[col] * inv_std[col];
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                normalized,
                inv_std,
            } => {
                let (dgamma, dbeta) = affine_param_grads(g, normalized);
                if self.wants(*input) {
                    let gam = self.value(*gamma).row(0);
                    let (n, c) = g.shape();
                    let width = c / groups;
                    let wf = width as f64;
                    let mut d = Array2::zeros(n, c);
                    for r in 0..n {
                        for grp in 0..*groups {
                            let cols = grp * width..(grp + 1) * width;
                            let mut sum_dn = 0.0;
                            let mut sum_dn_n = 0.0;
                            for col in cols.clone() {
                                let dn = g.get(r, col) * gam[col];
                                sum_dn += dn;
                                sum_dn_n += dn * normalized.get(r, col);
                            }
                            let is = inv_std[r * groups + grp];
                            for col in cols {
                                let dn = g.get(r, col) * gam[col];
                                let v = wf * dn - sum_dn - normalized.get(r, col) * sum_dn_n;
                                d.set(r, col, is / wf * v);
                            }
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
        }
    }
}

fn softmax_rows(x: &Array2, mask: Option<&[bool]>) -> Array2 {
    let (r, c) = x.shape();
    let mut out = Array2::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let max = (0..c)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let o = out.row_mut(i);
        for j in 0..c {
            if allowed(j) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
        }
        if total > 0.0 {
            o.iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}

pub(crate) fn smooth_l1_mean(pred: &Array2, target: &Array2, beta: f64) -> f64 {
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < beta {
                0.5 * e * e / beta
            } else {
                e - 0.5 * beta
            }
        })
        .sum();
    total / pred.len().max(1) as f64
}

fn column_normalize(x: &Array2, mean: &[f64], inv_std: &[f64]) -> Array2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(inv_std) {
            *v = (*v - m) * s;
        }
    }
    out
}

fn column_affine(normalized: &Array2, gamma: &Array2, beta: &Array2) -> Array2 {
    let mut out = normalized.clone();
    let (gam, bet) = (gamma.row(0), beta.row(0));
    for r in 0..out.rows() {
        for ((v, g), b) in out.row_mut(r).iter_mut().zip(gam).zip(bet) {
            *v = *v * g + b;
        }
    }
    out
}

fn affine_param_grads(g: &Array2, normalized: &Array2) -> (Array2, Array2) {
    let dbeta = g.sum_rows();
    let dgamma = g.zip_map(normalized, |a, b| a * b).sum_rows();
    (dgamma, dbeta)
}
