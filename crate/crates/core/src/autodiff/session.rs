//! Evaluation of a finished [`Graph`].
//!
//! A [`Session`] binds input values and memoizes every node it computes.
//! Re-feeding one input only invalidates that input's descendants, which is
//! what makes repeated Hessian-vector products at a fixed point cheap.

use super::graph::{Graph, NodeId, Op};
use super::tensor::{self, Tensor};
use super::AutodiffError;

pub struct Session<'g> {
    graph: &'g Graph,
    values: Vec<Option<Tensor>>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Self { graph, values: vec![None; graph.len()] }
    }

    /// Session with every `(name, value)` pair fed.
    pub fn with_inputs<'a, I>(graph: &'g Graph, inputs: I) -> Result<Self, AutodiffError>
    where
        I: IntoIterator<Item = (&'a str, Tensor)>,
    {
        let mut s = Self::new(graph);
        for (name, value) in inputs {
            s.feed(name, value)?;
        }
        Ok(s)
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// Binds an input, dropping cached values that depend on it.
    pub fn feed(&mut self, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let id = self
            .graph
            .input_id(name)
            .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))?;
        let expected = self.graph.shape(id);
        if value.shape() != expected {
            return Err(AutodiffError::InputShape {
                name: name.to_string(),
                node: id.index(),
                expected,
                found: value.shape(),
            });
        }
        if self.values[id.index()].is_some() {
            self.invalidate_descendants(id);
        }
        self.values[id.index()] = Some(value);
        Ok(())
    }

    fn invalidate_descendants(&mut self, id: NodeId) {
        let nodes = self.graph.nodes();
        let mut dirty = vec![false; nodes.len()];
        dirty[id.index()] = true;
        for i in id.index() + 1..nodes.len() {
            if nodes[i].op.parents().iter().any(|p| dirty[p.index()]) {
                dirty[i] = true;
                self.values[i] = None;
            }
        }
    }

    /// Value of `node`, computing any missing ancestors.
    pub fn eval(&mut self, node: NodeId) -> Result<&Tensor, AutodiffError> {
        self.ensure(&[node])?;
        Ok(self.values[node.index()].as_ref().expect("evaluated"))
    }

    /// Clones of the values of `nodes`, in order.
    pub fn eval_many(&mut self, nodes: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError> {
        self.ensure(nodes)?;
        Ok(nodes
            .iter()
            .map(|n| self.values[n.index()].clone().expect("evaluated"))
            .collect())
    }

    pub fn scalar(&mut self, node: NodeId) -> Result<f64, AutodiffError> {
        let t = self.eval(node)?;
        if t.shape() != super::Shape::SCALAR {
            return Err(AutodiffError::NonScalarLoss { node: node.index(), shape: t.shape() });
        }
        Ok(t.item())
    }

    fn ensure(&mut self, targets: &[NodeId]) -> Result<(), AutodiffError> {
        let nodes = self.graph.nodes();
        let Some(max) = targets.iter().map(|n| n.index()).max() else {
            return Ok(());
        };
        if max >= nodes.len() {
            return Err(AutodiffError::UnknownNode(max));
        }
        let mut pending = vec![false; max + 1];
        let mut stack: Vec<usize> = targets.iter().map(|n| n.index()).collect();
        while let Some(i) = stack.pop() {
            if pending[i] || self.values[i].is_some() {
                continue;
            }
            pending[i] = true;
            stack.extend(nodes[i].op.parents().iter().map(|p| p.index()));
        }
        for i in 0..=max {
            if pending[i] {
                let v = self.compute(NodeId(i))?;
                self.values[i] = Some(v);
            }
        }
        Ok(())
    }

    fn compute(&self, id: NodeId) -> Result<Tensor, AutodiffError> {
        let node = self.graph.node(id);
        let v = |n: NodeId| self.values[n.index()].as_ref().expect("parent evaluated first");
        Ok(match &node.op {
            Op::Input(name) => {
                return Err(AutodiffError::MissingInput { name: name.clone(), node: id.index() })
            }
            Op::Const(t) => t.clone(),
            Op::Zeros => Tensor::zeros(node.shape),
            Op::Add(a, b) => tensor::zip_map(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => tensor::zip_map(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => tensor::zip_map(v(*a), v(*b), |x, y| x * y),
            Op::Scale(a, c) => {
                let c = *c;
                tensor::map(v(*a), |x| c * x)
            }
            Op::MatMul { lhs, rhs, trans_lhs, trans_rhs } => {
                tensor::matmul(v(*lhs), v(*rhs), *trans_lhs, *trans_rhs)
            }
            Op::Broadcast(a) => tensor::broadcast(v(*a), node.shape),
            Op::SumTo(a) => tensor::sum_to(v(*a), node.shape),
            Op::Relu(a) => tensor::map(v(*a), |x| if x > 0.0 || x.is_nan() { x } else { 0.0 }),
            Op::ReluMask(a) => tensor::map(v(*a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::SoftmaxRows(a) => tensor::softmax_rows(v(*a)),
            Op::SoftmaxCrossEntropy { logits, targets } => {
                tensor::softmax_cross_entropy(v(*logits), v(*targets))
            }
            Op::Slice { src, offset } => tensor::slice(v(*src), *offset, node.shape),
            Op::Embed { src, offset } => tensor::embed(v(*src), *offset, node.shape),
            Op::Detach(a) => v(*a).clone(),
        })
    }
}

impl Graph {
    /// One-shot evaluation of `outputs` given named inputs.
    pub fn forward<'a, I>(&self, inputs: I, outputs: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError>
    where
        I: IntoIterator<Item = (&'a str, Tensor)>,
    {
        Session::with_inputs(self, inputs)?.eval_many(outputs)
    }
}
