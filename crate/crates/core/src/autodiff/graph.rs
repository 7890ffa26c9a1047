//! Define-then-run computation graph.
//!
//! Nodes are appended in topological order and never mutated. Differentiation
//! appends the backward computation as ordinary nodes, so any gradient can be
//! differentiated again.

use std::collections::BTreeMap;

use super::tensor::{Shape, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Const(Tensor),
    Zeros,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul { lhs: NodeId, rhs: NodeId, trans_lhs: bool, trans_rhs: bool },
    /// Repeat along the dimensions where the source has extent 1.
    Broadcast(NodeId),
    /// Sum down to the node's shape; the adjoint of `Broadcast`.
    SumTo(NodeId),
    Relu(NodeId),
    /// Heaviside step of the argument, 0 at exactly 0. Has no gradient.
    ReluMask(NodeId),
    SoftmaxRows(NodeId),
    /// Mean over rows of the cross-entropy against (one-hot or soft) targets.
    /// Targets are treated as data and receive no gradient.
    SoftmaxCrossEntropy { logits: NodeId, targets: NodeId },
    /// Contiguous window of the flattened source, reshaped.
    Slice { src: NodeId, offset: usize },
    /// Places the source into a zero tensor at a flat offset.
    Embed { src: NodeId, offset: usize },
    /// Identity forward, blocks gradient flow.
    Detach(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Zeros => "zeros",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Broadcast(_) => "broadcast",
            Op::SumTo(_) => "sum",
            Op::Relu(_) => "relu",
            Op::ReluMask(_) => "relu_mask",
            Op::SoftmaxRows(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Detach(_) => "detach",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Const(_) | Op::Zeros => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MatMul { lhs, rhs, .. } => vec![lhs, rhs],
            Op::SoftmaxCrossEntropy { logits, targets } => vec![logits, targets],
            Op::Scale(a, _)
            | Op::Broadcast(a)
            | Op::SumTo(a)
            | Op::Relu(a)
            | Op::ReluMask(a)
            | Op::SoftmaxRows(a)
            | Op::Slice { src: a, .. }
            | Op::Embed { src: a, .. }
            | Op::Detach(a) => vec![a],
        }
    }

    /// Parents through which gradient flows.
    fn differentiable_parents(&self) -> Vec<NodeId> {
        match *self {
            Op::ReluMask(_) | Op::Detach(_) => vec![],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            _ => self.parents(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Shape,
}

/// Gradient output nodes for a scalar root, aligned with `wrt`.
#[derive(Clone, Debug)]
pub struct GradHandle {
    pub root: NodeId,
    pub wrt: Vec<NodeId>,
    pub result: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.inputs.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    fn check(&self, id: NodeId) -> Result<Shape, AutodiffError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape)
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.len(),
            op,
            detail: format!("operands #{} {} and #{} {}", a.0, self.shape(a), b.0, self.shape(b)),
        }
    }

    /// Declares a named placeholder that must be fed at evaluation time.
    pub fn input(&mut self, name: &str, shape: Shape) -> Result<NodeId, AutodiffError> {
        if self.inputs.contains_key(name) {
            return Err(AutodiffError::DuplicateInput(name.to_string()));
        }
        let id = self.push(Op::Input(name.to_string()), shape);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Const(value), shape)
    }

    pub fn zeros(&mut self, shape: Shape) -> NodeId {
        self.push(Op::Zeros, shape)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(self.mismatch(op.name(), a, b));
        }
        Ok(self.push(op, sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        Ok(self.push(Op::Scale(a, factor), s))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_t(lhs, rhs, false, false)
    }

    /// `op(lhs) * op(rhs)` with optional transposes.
    pub fn matmul_t(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        trans_lhs: bool,
        trans_rhs: bool,
    ) -> Result<NodeId, AutodiffError> {
        let mut sa = self.check(lhs)?;
        let mut sb = self.check(rhs)?;
        if trans_lhs {
            sa = sa.transposed();
        }
        if trans_rhs {
            sb = sb.transposed();
        }
        if sa.cols != sb.rows {
            return Err(self.mismatch("matmul", lhs, rhs));
        }
        Ok(self.push(Op::MatMul { lhs, rhs, trans_lhs, trans_rhs }, Shape::new(sa.rows, sb.cols)))
    }

    pub fn broadcast(&mut self, a: NodeId, to: Shape) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        if s == to {
            return Ok(a);
        }
        if !s.broadcasts_to(to) {
            return Err(AutodiffError::ShapeMismatch {
                node: self.len(),
                op: "broadcast",
                detail: format!("cannot broadcast #{} {s} to {to}", a.0),
            });
        }
        Ok(self.push(Op::Broadcast(a), to))
    }

    pub fn sum_to(&mut self, a: NodeId, to: Shape) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        if s == to {
            return Ok(a);
        }
        if !to.broadcasts_to(s) {
            return Err(AutodiffError::ShapeMismatch {
                node: self.len(),
                op: "sum",
                detail: format!("cannot reduce #{} {s} to {to}", a.0),
            });
        }
        Ok(self.push(Op::SumTo(a), to))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.sum_to(a, Shape::SCALAR)
    }

    /// Inner product of two same-shaped nodes, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        Ok(self.push(Op::Relu(a), s))
    }

    pub fn relu_mask(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        Ok(self.push(Op::ReluMask(a), s))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        Ok(self.push(Op::SoftmaxRows(a), s))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (sl, st) = (self.check(logits)?, self.check(targets)?);
        if sl != st {
            return Err(self.mismatch("softmax_cross_entropy", logits, targets));
        }
        if sl.rows == 0 {
            return Err(AutodiffError::ShapeMismatch {
                node: self.len(),
                op: "softmax_cross_entropy",
                detail: "empty batch".into(),
            });
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, targets }, Shape::SCALAR))
    }

    pub fn slice(&mut self, src: NodeId, offset: usize, shape: Shape) -> Result<NodeId, AutodiffError> {
        let s = self.check(src)?;
        if offset + shape.len() > s.len() {
            return Err(AutodiffError::ShapeMismatch {
                node: self.len(),
                op: "slice",
                detail: format!("window {offset}+{} exceeds #{} {s}", shape.len(), src.0),
            });
        }
        Ok(self.push(Op::Slice { src, offset }, shape))
    }

    pub fn embed(&mut self, src: NodeId, offset: usize, total: Shape) -> Result<NodeId, AutodiffError> {
        let s = self.check(src)?;
        if offset + s.len() > total.len() {
            return Err(AutodiffError::ShapeMismatch {
                node: self.len(),
                op: "embed",
                detail: format!("#{} {s} at {offset} exceeds {total}", src.0),
            });
        }
        Ok(self.push(Op::Embed { src, offset }, total))
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.check(a)?;
        Ok(self.push(Op::Detach(a), s))
    }

    /// Appends nodes computing `d root / d wrt[i]` for each `wrt`.
    ///
    /// With `differentiable` set, the returned nodes can be differentiated
    /// again and yield exact higher derivatives. Otherwise each result is
    /// wrapped in a `Detach`. A `wrt` node that does not influence `root`
    /// gets a zero gradient.
    pub fn gradient(
        &mut self,
        root: NodeId,
        wrt: &[NodeId],
        differentiable: bool,
    ) -> Result<GradHandle, AutodiffError> {
        let root_shape = self.check(root)?;
        if root_shape != Shape::SCALAR {
            return Err(AutodiffError::NonScalarLoss { node: root.0, shape: root_shape });
        }
        for &w in wrt {
            self.check(w)?;
        }
        let end = root.0 + 1;

        // Nodes on some path from a wrt node to the root.
        let mut active = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                active[w.0] = true;
            }
        }
        for i in 0..end {
            if !active[i] {
                active[i] = self.nodes[i].op.differentiable_parents().iter().any(|p| active[p.0]);
            }
        }
        let mut needed = vec![false; end];
        needed[root.0] = true;
        for i in (0..end).rev() {
            if needed[i] {
                for p in self.nodes[i].op.parents() {
                    needed[p.0] = true;
                }
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if active[root.0] {
            adjoint[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..end).rev() {
            if !(active[i] && needed[i]) {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let out = NodeId(i);
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.backward(out, &op, g, &active)? {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        let mut result = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => self.zeros(self.shape(w)),
            };
            result.push(if differentiable { g } else { self.detach(g)? });
        }
        Ok(GradHandle { root, wrt: wrt.to_vec(), result })
    }

    /// Vector-Jacobian contributions of one node to its active parents.
    fn backward(
        &mut self,
        out: NodeId,
        op: &Op,
        g: NodeId,
        active: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        let on = |n: NodeId| active[n.0];
        let mut contribs = Vec::with_capacity(2);
        match *op {
            Op::Input(_) | Op::Const(_) | Op::Zeros | Op::ReluMask(_) | Op::Detach(_) => {}
            Op::Add(a, b) => {
                if on(a) {
                    contribs.push((a, g));
                }
                if on(b) {
                    contribs.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if on(a) {
                    contribs.push((a, g));
                }
                if on(b) {
                    contribs.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if on(a) {
                    contribs.push((a, self.mul(g, b)?));
                }
                if on(b) {
                    contribs.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => {
                if on(a) {
                    contribs.push((a, self.scale(g, c)?));
                }
            }
            Op::MatMul { lhs, rhs, trans_lhs, trans_rhs } => {
                if on(lhs) {
                    let d = if trans_lhs {
                        self.matmul_t(rhs, g, trans_rhs, true)?
                    } else {
                        self.matmul_t(g, rhs, false, !trans_rhs)?
                    };
                    contribs.push((lhs, d));
                }
                if on(rhs) {
                    let d = if trans_rhs {
                        self.matmul_t(g, lhs, true, trans_lhs)?
                    } else {
                        self.matmul_t(lhs, g, !trans_lhs, false)?
                    };
                    contribs.push((rhs, d));
                }
            }
            Op::Broadcast(a) => {
                if on(a) {
                    let s = self.shape(a);
                    contribs.push((a, self.sum_to(g, s)?));
                }
            }
            Op::SumTo(a) => {
                if on(a) {
                    let s = self.shape(a);
                    contribs.push((a, self.broadcast(g, s)?));
                }
            }
            Op::Relu(a) => {
                if on(a) {
                    let mask = self.relu_mask(a)?;
                    contribs.push((a, self.mul(g, mask)?));
                }
            }
            Op::SoftmaxRows(a) => {
                // dx = s * (g - rowsum(g * s))
                if on(a) {
                    let s = self.shape(a);
                    let gs = self.mul(g, out)?;
                    let rows = self.sum_to(gs, Shape::new(s.rows, 1))?;
                    let rows = self.broadcast(rows, s)?;
                    let centered = self.sub(g, rows)?;
                    contribs.push((a, self.mul(out, centered)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                // dlogits = g * (softmax(logits) - targets) / rows
                if on(logits) {
                    let s = self.shape(logits);
                    let probs = self.softmax_rows(logits)?;
                    let diff = self.sub(probs, targets)?;
                    let diff = self.scale(diff, 1.0 / s.rows as f64)?;
                    let gb = self.broadcast(g, s)?;
                    contribs.push((logits, self.mul(gb, diff)?));
                }
            }
            Op::Slice { src, offset } => {
                if on(src) {
                    let s = self.shape(src);
                    contribs.push((src, self.embed(g, offset, s)?));
                }
            }
            Op::Embed { src, offset } => {
                if on(src) {
                    let s = self.shape(src);
                    contribs.push((src, self.slice(g, offset, s)?));
                }
            }
        }
        Ok(contribs)
    }
}
