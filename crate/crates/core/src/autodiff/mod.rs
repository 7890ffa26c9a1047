//! Reverse-mode automatic differentiation with double backward.
//!
//! Graphs are built once, symbolically, and evaluated through a [`Session`].
//! [`Graph::gradient`] appends the backward pass as regular nodes, so
//! gradients of gradients (second-order meta-gradients, Hessian-vector
//! products) are plain compositions.

mod graph;
mod session;
mod tensor;

pub use graph::{GradHandle, Graph, Node, NodeId, Op};
pub use session::Session;
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch building node #{node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("input '{name}' (node #{node}) expects shape {expected}, got {found}")]
    InputShape { name: String, node: usize, expected: Shape, found: Shape },
    #[error("input '{name}' (node #{node}) was not fed")]
    MissingInput { name: String, node: usize },
    #[error("graph has no input named '{0}'")]
    UnknownInput(String),
    #[error("input '{0}' declared twice")]
    DuplicateInput(String),
    #[error("node #{0} does not exist")]
    UnknownNode(usize),
    #[error("gradient root #{node} must be scalar, has shape {shape}")]
    NonScalarLoss { node: usize, shape: Shape },
    #[error("vector of length {found} does not match {expected} parameters")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Hessian-vector product nodes for a scalar loss of a single column-vector
/// parameter node.
///
/// The product is the gradient of `grad(loss) . v`, with `v` a graph input,
/// so it is exact up to roundoff.
#[derive(Clone, Debug)]
pub struct HvpNodes {
    pub grad: NodeId,
    pub directional: NodeId,
    pub product: NodeId,
    pub vector_input: String,
}

impl Graph {
    /// Appends the nodes computing `H v` for `loss` w.r.t. `param`. The
    /// vector is read from a new input called `vector_input`.
    pub fn hvp_nodes(
        &mut self,
        loss: NodeId,
        param: NodeId,
        vector_input: &str,
    ) -> Result<HvpNodes, AutodiffError> {
        let shape = self.shape(param);
        let v = self.input(vector_input, shape)?;
        let grad = self.gradient(loss, &[param], true)?.result[0];
        let directional = self.dot(grad, v)?;
        let product = self.gradient(directional, &[param], true)?.result[0];
        Ok(HvpNodes { grad, directional, product, vector_input: vector_input.to_string() })
    }
}

/// Computes `H v` with the loss and gradient cached across calls.
pub struct HvpOperator<'g> {
    session: Session<'g>,
    nodes: HvpNodes,
    dim: usize,
}

impl<'g> HvpOperator<'g> {
    /// `session` must already hold every input except the vector.
    pub fn new(session: Session<'g>, nodes: HvpNodes) -> Self {
        let dim = session.graph().shape(nodes.product).len();
        Self { session, nodes, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>, AutodiffError> {
        if v.len() != self.dim {
            return Err(AutodiffError::DimensionMismatch { expected: self.dim, found: v.len() });
        }
        let shape = self.session.graph().shape(self.nodes.product);
        self.session.feed(&self.nodes.vector_input, Tensor::new(shape, v.to_vec()))?;
        Ok(self.session.eval(self.nodes.product)?.data().to_vec())
    }

    pub fn gradient(&mut self) -> Result<Vec<f64>, AutodiffError> {
        Ok(self.session.eval(self.nodes.grad)?.data().to_vec())
    }
}

/// One-shot Hessian-vector product of `loss` w.r.t. the column node `param`.
/// `inputs` must feed every input the loss depends on.
pub fn hvp<'a, I>(
    graph: &mut Graph,
    loss: NodeId,
    param: NodeId,
    inputs: I,
    v: &[f64],
) -> Result<Vec<f64>, AutodiffError>
where
    I: IntoIterator<Item = (&'a str, Tensor)>,
{
    let expected = graph.shape(param).len();
    if v.len() != expected {
        return Err(AutodiffError::DimensionMismatch { expected, found: v.len() });
    }
    let name = format!("__hvp_v{}", graph.len());
    let nodes = graph.hvp_nodes(loss, param, &name)?;
    let session = Session::with_inputs(graph, inputs)?;
    HvpOperator::new(session, nodes).apply(v)
}
