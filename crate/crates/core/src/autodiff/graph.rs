//! Tape-style computation graph over dense tensors.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.
//! Leaves are either trainable parameters (tagged with a [`ParamId`]) or
//! constants; a constant leaf is how a parameter set is detached.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Variance epsilon shared by batch and running-statistics normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Where batchnorm takes its normalization statistics from.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Batch statistics (biased variance).
    Train,
    /// Supplied running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::config(format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(AxisSplit {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn index(&self, o: usize, k: usize, i: usize) -> usize {
        (o * self.len + k) * self.inner + i
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    Add { a: NodeId, b: NodeId, broadcast_rows: bool },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId, AxisSplit),
    LogSoftmax(NodeId, AxisSplit),
    LogClamp { x: NodeId, floor: f64 },
    CrossEntropy { logp: NodeId, target: NodeId },
    Slice { x: NodeId, rows: Range<usize>, cols: Range<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    SumAxis { x: NodeId, axis: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add { .. } => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogClamp { .. } => "log",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::BatchNorm { .. } => "batchnorm",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Parameter gradients keyed by id, each with the full parameter shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    /// `self += alpha * other`, adding entries missing from `self`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        for (id, g) in other.iter() {
            match self.map.get_mut(&id) {
                Some(mine) => mine.axpy(alpha, g)?,
                None => {
                    let mut t = g.clone();
                    t.scale_in_place(alpha);
                    self.map.insert(id, t);
                }
            }
        }
        Ok(())
    }

    /// Keeps only the listed parameters.
    pub fn restrict(&self, keep: impl Fn(ParamId) -> bool) -> Gradients {
        Gradients { map: self.map.iter().filter(|(k, _)| keep(**k)).map(|(k, v)| (*k, v.clone())).collect() }
    }

    /// Largest absolute entry over all listed parameters.
    pub fn max_abs(&self) -> f64 {
        self.map.values().flat_map(|t| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A single-use (until [`Graph::reset_grads`]) reverse-mode graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    /// Gradient slot of a node after a backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("{} produced a non-finite value", op.name())));
        }
        self.push_arc(op, Arc::new(value))
    }

    fn push_arc(&mut self, op: Op, value: Arc<Tensor>) -> Result<NodeId> {
        let requires_grad = match &op {
            Op::Leaf(p) => p.is_some(),
            Op::MatMul(a, b) | Op::Mul(a, b) | Op::Add { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::LogClamp { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. } => self.rg(*x),
            Op::CrossEntropy { logp, target } => self.rg(*logp) || self.rg(*target),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.rg(*p)),
            Op::BatchNorm { x, gamma, beta, .. } => self.rg(*x) || self.rg(*gamma) || self.rg(*beta),
        };
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push_arc(Op::Leaf(None), value).expect("leaf push is infallible")
    }

    /// Trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Arc<Tensor>) -> NodeId {
        self.push_arc(Op::Leaf(Some(id)), value).expect("leaf push is infallible")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    /// Elementwise sum. `b` may also be a row vector (`[c]` or `[1, c]`)
    /// broadcast over the rows of matrix `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
            return self.push(Op::Add { a, b, broadcast_rows: false }, out);
        }
        let (_, c) = va.require_matrix("add")?;
        let row_like = matches!(vb.shape(), [n] if *n == c) || matches!(vb.shape(), [1, n] if *n == c);
        if !row_like {
            return Err(Error::config(format!(
                "add shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let bias = vb.data();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let out = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        self.push(Op::Add { a, b, broadcast_rows: true }, out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::config(format!("mul shape mismatch {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| alpha * v);
        self.push(Op::Scale(x, alpha), out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let split = AxisSplit::new(self.value(x).shape(), axis)?;
        let out = softmax_along(self.value(x), split, false);
        self.push(Op::Softmax(x, split), out)
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let split = AxisSplit::new(self.value(x).shape(), axis)?;
        let out = softmax_along(self.value(x), split, true);
        self.push(Op::LogSoftmax(x, split), out)
    }

    /// `ln(clamp(x, floor, 1))`; the gradient is zero where clamping is active.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.clamp(floor, 1.0).ln());
        self.push(Op::LogClamp { x, floor }, out)
    }

    /// `-(1/rows) * sum(target * logp)`, rows being all but the last axis.
    pub fn cross_entropy(&mut self, logp: NodeId, target: NodeId) -> Result<NodeId> {
        let (vl, vt) = (self.value(logp), self.value(target));
        if vl.shape() != vt.shape() {
            return Err(Error::config(format!(
                "cross_entropy shape mismatch {:?} vs {:?}",
                vl.shape(),
                vt.shape()
            )));
        }
        let rows = vl.rows() as f64;
        let s: f64 = vl.data().iter().zip(vt.data()).map(|(l, t)| t * l).sum();
        self.push(Op::CrossEntropy { logp, target }, Tensor::scalar(-s / rows))
    }

    /// Sub-block of a matrix. A vector is treated as a single row and stays
    /// a vector.
    pub fn slice(&mut self, x: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let out = if v.shape().len() == 1 {
            if rows != (0..1) || cols.is_empty() || cols.end > v.len() {
                return Err(Error::config(format!("slice {rows:?}x{cols:?} out of bounds for vector of {}", v.len())));
            }
            Tensor::vector(v.data()[cols.clone()].to_vec())
        } else {
            v.slice2(rows.clone(), cols.clone())?
        };
        self.push(Op::Slice { x, rows, cols }, out)
    }

    /// Leading `len` entries of a vector.
    pub fn slice_vec(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        self.slice(x, 0..1, 0..len)
    }

    pub fn slice_cols(&mut self, x: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let (r, _) = self.value(x).require_matrix("slice_cols")?;
        self.slice(x, 0..r, cols)
    }

    pub fn slice_rows(&mut self, x: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let (_, c) = self.value(x).require_matrix("slice_rows")?;
        self.slice(x, rows, 0..c)
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::config("concat needs at least one part and axis 0 or 1"));
        }
        let shapes: Vec<(usize, usize)> =
            parts.iter().map(|p| self.value(*p).require_matrix("concat")).collect::<Result<_>>()?;
        let out = if axis == 0 {
            let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::vstack(&refs)?
        } else {
            let rows = shapes[0].0;
            if shapes.iter().any(|s| s.0 != rows) {
                return Err(Error::config("concat along columns needs equal row counts"));
            }
            let total: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        self.push(Op::Concat { parts: parts.to_vec(), axis }, out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Sum of a matrix over one axis, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (r, c) = v.require_matrix("sum_axis")?;
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for row in v.data().chunks(c) {
                    acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                Tensor::matrix(1, c, acc)?
            }
            1 => Tensor::matrix(r, 1, v.data().chunks(c).map(|row| row.iter().sum()).collect())?,
            _ => return Err(Error::config(format!("sum_axis: bad axis {axis}"))),
        };
        self.push(Op::SumAxis { x, axis }, out)
    }

    /// Per-column normalization followed by `gamma * xhat + beta`.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode<'_>) -> Result<NodeId> {
        let vx = self.value(x);
        let (n, c) = vx.require_matrix("batchnorm")?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::config(format!(
                "batchnorm affine shapes {:?}/{:?} for {c} channels",
                vg.shape(),
                vb.shape()
            )));
        }
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::usage("batchnorm batch statistics need at least 2 rows"));
                }
                let (m, v) = column_moments(vx.data(), n, c);
                (m, v, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::config("batchnorm running statistics width mismatch"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::numeric("batchnorm statistics overflowed"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        let (g, b) = (vg.data(), vb.data());
        for r in 0..n {
            for j in 0..c {
                let i = r * c + j;
                let h = (vx.data()[i] - mean[j]) * inv_std[j];
                xhat[i] = h;
                out[i] = g[j] * h + b[j];
            }
        }
        let out = Tensor::matrix(n, c, out)?;
        self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, out)
    }

    /// Clears gradient slots so another backward pass can run.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar node. Returns gradients of every trainable
    /// leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::usage("backward called twice without reset_grads"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut out = Gradients::new();
        if !self.rg(loss) {
            return Ok(out);
        }
        let shape = self.value(loss).shape().to_vec();
        self.grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient at {}", self.nodes[idx].op.name())));
            }
            self.propagate(idx, &g, &mut out)?;
            self.grads[idx] = Some(g);
        }
        Ok(out)
    }

    fn propagate(&mut self, idx: usize, g: &Tensor, out: &mut Gradients) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let value = &nodes[idx].value;
        let op = &nodes[idx].op;
        match op {
            Op::Leaf(Some(pid)) => {
                match out.map.get_mut(pid) {
                    Some(acc) => acc.axpy(1.0, g)?,
                    None => {
                        out.map.insert(*pid, g.clone());
                    }
                }
            }
            Op::Leaf(None) => {}
            Op::MatMul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g.data(), false, vb.data(), true, ga.data_mut(), true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, va.data(), true, g.data(), false, gb.data_mut(), true);
                }
            }
            Op::Add { a, b, broadcast_rows } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.axpy(1.0, g)?;
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if *broadcast_rows {
                        let c = gb.len();
                        let acc = gb.data_mut();
                        for row in g.data().chunks(c) {
                            acc.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    } else {
                        gb.axpy(1.0, g)?;
                    }
                }
            }
            Op::Mul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((s, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *s += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((s, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *s += gi * ai;
                    }
                }
            }
            Op::Scale(x, alpha) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.axpy(*alpha, g)?;
                }
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((s, gi), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                        if *xi > 0.0 {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Softmax(x, split) => {
                let split = *split;
                if let Some(gx) = slot(nodes, grads, *x) {
                    let (y, dy, dx) = (value.data(), g.data(), gx.data_mut());
                    for o in 0..split.outer {
                        for i in 0..split.inner {
                            let dot: f64 =
                                (0..split.len).map(|k| dy[split.index(o, k, i)] * y[split.index(o, k, i)]).sum();
                            for k in 0..split.len {
                                let p = split.index(o, k, i);
                                dx[p] += y[p] * (dy[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, split) => {
                let split = *split;
                if let Some(gx) = slot(nodes, grads, *x) {
                    let (y, dy, dx) = (value.data(), g.data(), gx.data_mut());
                    for o in 0..split.outer {
                        for i in 0..split.inner {
                            let total: f64 = (0..split.len).map(|k| dy[split.index(o, k, i)]).sum();
                            for k in 0..split.len {
                                let p = split.index(o, k, i);
                                dx[p] += dy[p] - y[p].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LogClamp { x, floor } => {
                let floor = *floor;
                let vx = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((s, gi), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                        if *xi >= floor && *xi <= 1.0 {
                            *s += gi / xi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logp, target } => {
                let scale = g.item()?;
                let vl = &nodes[logp.0].value;
                let vt = &nodes[target.0].value;
                let rows = vl.rows() as f64;
                if let Some(gl) = slot(nodes, grads, *logp) {
                    gl.axpy(-scale / rows, &vt)?;
                }
                if let Some(gt) = slot(nodes, grads, *target) {
                    gt.axpy(-scale / rows, &vl)?;
                }
            }
            Op::Slice { x, rows, cols } => {
                let (rows, cols) = (rows.clone(), cols.clone());
                if let Some(gx) = slot(nodes, grads, *x) {
                    let full_cols = gx.cols();
                    let w = cols.len();
                    let dst = gx.data_mut();
                    for (i, r) in rows.enumerate() {
                        let src = &g.data()[i * w..(i + 1) * w];
                        let off = r * full_cols + cols.start;
                        dst[off..off + w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let total_cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = {
                        let v = &nodes[p.0].value;
                        (v.shape()[0], v.shape()[1])
                    };
                    if let Some(gp) = slot(nodes, grads, p) {
                        let dst = gp.data_mut();
                        if *axis == 0 {
                            let src = &g.data()[offset * total_cols..(offset + pr) * total_cols];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        } else {
                            for r in 0..pr {
                                let src = &g.data()[r * total_cols + offset..r * total_cols + offset + pc];
                                dst[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Sum(x) => {
                let s = g.item()?;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.data_mut().iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Mean(x) => {
                let s = g.item()?;
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = gx.len() as f64;
                    gx.data_mut().iter_mut().for_each(|v| *v += s / n);
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = gx.cols();
                    let dst = gx.data_mut();
                    for (r, row) in dst.chunks_mut(c).enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v += if *axis == 0 { g.data()[j] } else { g.data()[r] };
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c) = (value.shape()[0], value.shape()[1]);
                let vg = &nodes[gamma.0].value;
                let dy = g.data();
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    let acc = gg.data_mut();
                    for r in 0..n {
                        for j in 0..c {
                            acc[j] += dy[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    let acc = gb.data_mut();
                    for row in dy.chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if nodes[x.0].requires_grad {
                    let gamma_v = vg.data();
                    let mut dx = vec![0.0; n * c];
                    if *batch_stats {
                        let nf = n as f64;
                        for j in 0..c {
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for r in 0..n {
                                let d = dy[r * c + j] * gamma_v[j];
                                sum_d += d;
                                sum_dh += d * xhat[r * c + j];
                            }
                            for r in 0..n {
                                let i = r * c + j;
                                let d = dy[i] * gamma_v[j];
                                dx[i] = inv_std[j] / nf * (nf * d - sum_d - xhat[i] * sum_dh);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx[r * c + j] = dy[r * c + j] * gamma_v[j] * inv_std[j];
                            }
                        }
                    }
                    let gx = slot(nodes, grads, *x).expect("requires_grad checked");
                    gx.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(())
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut Tensor> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let shape = nodes[id.0].value.shape();
    Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)))
}

fn softmax_along(x: &Tensor, split: AxisSplit, log: bool) -> Tensor {
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..split.outer {
        for i in 0..split.inner {
            let max = (0..split.len).map(|k| src[split.index(o, k, i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..split.len).map(|k| (src[split.index(o, k, i)] - max).exp()).sum();
            let lse = max + sum.ln();
            for k in 0..split.len {
                let p = split.index(o, k, i);
                out[p] = if log { src[p] - lse } else { (src[p] - max).exp() / sum };
            }
        }
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out)
}

/// Column means and biased variances of an `n × c` row-major block.
pub(crate) fn column_moments(data: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for row in data.chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in data.chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}
