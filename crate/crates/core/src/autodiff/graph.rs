//! Tape of recorded operations with reverse-mode gradient propagation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; [`Graph::backward`] walks it in reverse. Leaves are
//! either constants (inputs, masks) or trainable parameters, and only nodes
//! that descend from a parameter carry gradients.

use super::tensor::{matmul_raw, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Mask { x: NodeId, mask: Tensor },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    SoftmaxCe { logits: NodeId, target: usize, probs: Vec<f64> },
    Gather { table: NodeId, rows: Vec<usize> },
    Reshape(NodeId),
    L2NormalizeRows { x: NodeId, norms: Vec<f64> },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Floor applied to row norms in [`Graph::l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        debug_assert!(!self.backward_done, "graph extended after backward");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check_matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `x W + bias`, with `bias` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, din) = self.check_matrix("affine", x)?;
        let (wr, dout) = self.check_matrix("affine", w)?;
        if din != wr {
            return Err(Error::Shape {
                op: "affine",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [dout] {
            return Err(Error::Shape {
                op: "affine bias",
                left: self.shape(w).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), n, din, dout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.check_matrix("matmul", a)?;
        let (k2, m) = self.check_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_matrix("transpose", a)?;
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    /// Elementwise product with a constant mask.
    pub fn apply_mask(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        if mask.data().iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(contract("mask values must be finite and nonnegative"));
        }
        let value = self
            .value(x)
            .zip_map(&mask, |a, m| a * m)
            .map_err(|_| Error::Shape {
                op: "apply_mask",
                left: self.shape(x).to_vec(),
                right: mask.shape().to_vec(),
            })?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Mask { x, mask }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), value, rg)
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), value, rg)
    }

    /// Column means of an `[n, d]` matrix as a `[1, d]` row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.check_matrix("mean_rows", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; d];
        for row in src.chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::new(vec![1, d], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MeanRows(a), value, rg))
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, d) = self.check_matrix("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SoftmaxRows(a), value, rg))
    }

    /// `-log softmax(logits)[target]` over all entries of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Index {
                what: "logits",
                index: target,
                len: z.len(),
            });
        }
        let (loss, probs) = cross_entropy(z, target);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross-entropy of {z:?}")));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` selected by `rows`.
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check_matrix("gather_rows", table)?;
        let value = self.value(table).select_rows(rows)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Scales every row to unit Euclidean norm (norms floored at [`NORM_FLOOR`]).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, d) = self.check_matrix("l2_normalize_rows", x)?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::L2NormalizeRows { x, norms }, value, rg))
    }

    /// `Σ w_k · t_k` over same-shaped nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| contract("weighted_sum needs at least one term"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(id, w) in terms {
            if self.shape(id) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    left: shape,
                    right: self.shape(id).to_vec(),
                });
            }
            for (o, v) in out.iter_mut().zip(self.value(id).data()) {
                *o += w * v;
            }
        }
        let value = Tensor::new(shape, out)?;
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::WeightedSum(terms.to_vec()), value, rg))
    }

    /// Propagates gradients from a scalar root to every ancestor that
    /// requires them. May be called once per graph.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(contract("backward already ran on this graph"));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        let shape = self.shape(root).to_vec();
        self.nodes[root.0].grad = Some(Tensor::ones(&shape));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &gy)?;
            self.nodes[idx].grad = Some(gy);
            for (parent, g) in contributions {
                self.accumulate(parent, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(acc) => {
                if acc.shape() != g.shape() {
                    return Err(Error::Shape {
                        op: "accumulate",
                        left: acc.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            None => node.grad = Some(g),
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, idx: usize, gy: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = xv.dims2();
                let dout = wv.dims2().1;
                if self.wants(*x) {
                    let wt = wv.transpose();
                    let gx = matmul_raw(gy.data(), wt.data(), n, dout, din);
                    out.push((*x, Tensor::new(vec![n, din], gx)?));
                }
                if self.wants(*w) {
                    let xt = xv.transpose();
                    let gw = matmul_raw(xt.data(), gy.data(), din, n, dout);
                    out.push((*w, Tensor::new(vec![din, dout], gw)?));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; dout];
                    for row in gy.data().chunks(dout) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((*b, Tensor::new(vec![dout], gb)?));
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.dims2();
                let m = bv.dims2().1;
                if self.wants(*a) {
                    let bt = bv.transpose();
                    let ga = matmul_raw(gy.data(), bt.data(), n, m, k);
                    out.push((*a, Tensor::new(vec![n, k], ga)?));
                }
                if self.wants(*b) {
                    let at = av.transpose();
                    let gb = matmul_raw(at.data(), gy.data(), k, n, m);
                    out.push((*b, Tensor::new(vec![k, m], gb)?));
                }
            }
            Op::Transpose(a) => out.push((*a, gy.transpose())),
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .zip_map(gy, |v, g| if v > 0.0 { g } else { 0.0 })?;
                out.push((*x, g));
            }
            Op::Mask { x, mask } => out.push((*x, gy.zip_map(mask, |g, m| g * m)?)),
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.map(|g| -g)));
            }
            Op::Scale(a, s) => out.push((*a, gy.map(|g| g * s))),
            Op::Sum(a) => {
                let g = gy.item();
                out.push((*a, Tensor::full(self.shape(*a), g)));
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).dims2();
                let inv = 1.0 / n as f64;
                let row: Vec<f64> = gy.data().iter().map(|g| g * inv).collect();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend_from_slice(&row);
                }
                out.push((*a, Tensor::new(vec![n, d], data)?));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (_, d) = y.dims2();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dyr) in g
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(gy.data().chunks(d))
                {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] = yr[j] * (dyr[j] - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), g)?));
            }
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => {
                let g0 = gy.item();
                let mut g: Vec<f64> = probs.iter().map(|p| p * g0).collect();
                g[*target] -= g0;
                out.push((*logits, Tensor::new(self.shape(*logits).to_vec(), g)?));
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let (_, d) = tv.dims2();
                let mut g = vec![0.0; tv.len()];
                for (src, &r) in gy.data().chunks(d).zip(rows) {
                    for (o, v) in g[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                out.push((*table, Tensor::new(tv.shape().to_vec(), g)?));
            }
            Op::Reshape(a) => out.push((*a, gy.reshape(self.shape(*a).to_vec())?)),
            Op::L2NormalizeRows { x, norms } => {
                let y = &self.nodes[idx].value;
                let (_, d) = y.dims2();
                let mut g = vec![0.0; y.len()];
                for (((gr, yr), dyr), n) in g
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(gy.data().chunks(d))
                    .zip(norms)
                {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] = (dyr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), g)?));
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    out.push((id, gy.map(|g| g * w)));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Fused, max-shifted `(−log softmax(z)[target], softmax(z))`.
pub fn cross_entropy(z: &[f64], target: usize) -> (f64, Vec<f64>) {
    let (argmax, max) = z
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    // mass outside the argmax entry, so log-sum-exp is max + ln_1p(rest)
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, v)| (v - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    let probs = z.iter().map(|v| (v - max - log_norm).exp()).collect();
    ((max - z[target]) + log_norm, probs)
}
