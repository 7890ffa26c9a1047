//! Multilayer-perceptron classifiers over a flat parameter vector.
//!
//! Layout is layer-major in forward order: for each layer the weight matrix
//! (`fan_in x fan_out`, row-major) followed by its bias (`fan_out`).

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Session, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has {found} entries, model expects {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("inputs have {found} features, model expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("label {label} out of range for a {n_way}-way model")]
    LabelOutOfRange { label: usize, n_way: usize },
    #[error("loss over an empty sample set")]
    EmptyBatch,
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_way: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, n_way: usize) -> Self {
        Self { input_dim, hidden_dims, n_way }
    }

    /// 20 inputs, two hidden layers of 64, 5-way.
    pub fn desk() -> Self {
        Self::new(20, vec![64, 64], 5)
    }

    /// Small enough (229 parameters) for dense-Hessian checks.
    pub fn tiny() -> Self {
        Self::new(8, vec![16], 5)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.n_way == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("zero-sized layer in {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer in forward order.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.n_way);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Offset of the final layer's block (weights then bias).
    pub fn head_offset(&self) -> usize {
        let layers = self.layers();
        layers[..layers.len() - 1].iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn with_way(&self, n_way: usize) -> Self {
        Self { n_way, ..self.clone() }
    }
}

/// Flat, ordered model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::column(self.0.clone())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_len(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        let expected = spec.param_count();
        if self.len() != expected {
            return Err(ModelError::ParamCount { expected, found: self.len() });
        }
        Ok(())
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl AsRef<[f64]> for ParameterVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Self {
        assert_eq!(features.shape().rows, labels.len(), "one label per row");
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape().cols
    }

    pub fn one_hot(&self, n_way: usize) -> Result<Tensor, ModelError> {
        let mut t = Tensor::zeros(Shape::new(self.len(), n_way));
        for (r, &l) in self.labels.iter().enumerate() {
            if l >= n_way {
                return Err(ModelError::LabelOutOfRange { label: l, n_way });
            }
            t.data_mut()[r * n_way + l] = 1.0;
        }
        Ok(t)
    }
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_layer(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let bound = xavier_bound(fan_in, fan_out);
    let (w, b) = out.split_at_mut(fan_in * fan_out);
    for v in w {
        *v = rng.random_range(-bound..bound);
    }
    b.fill(0.0);
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    let mut offset = 0;
    for (fi, fo) in spec.layers() {
        let len = (fi + 1) * fo;
        fill_layer(&mut rng, &mut values[offset..offset + len], fi, fo);
        offset += len;
    }
    ParameterVector(values)
}

/// Swaps the output layer for a freshly initialized `new_way`-way head,
/// copying every other parameter.
pub fn replace_head(
    spec: &ModelSpec,
    params: &ParameterVector,
    new_way: usize,
    seed: u64,
) -> Result<(ModelSpec, ParameterVector), ModelError> {
    params.check_len(spec)?;
    if new_way < 2 {
        return Err(ModelError::InvalidSpec(format!("head needs at least 2 classes, got {new_way}")));
    }
    let new_spec = spec.with_way(new_way);
    let body = spec.head_offset();
    let fan_in = spec.layers().last().expect("at least one layer").0;
    let mut values = Vec::with_capacity(new_spec.param_count());
    values.extend_from_slice(&params[..body]);
    values.resize(new_spec.param_count(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_layer(&mut rng, &mut values[body..], fan_in, new_way);
    Ok((new_spec, ParameterVector(values)))
}

/// Appends the logits of `spec` applied to `inputs` (`rows x input_dim`) with
/// the flat parameter column `params`.
pub fn build_logits(
    graph: &mut Graph,
    spec: &ModelSpec,
    params: NodeId,
    inputs: NodeId,
) -> Result<NodeId, ModelError> {
    let rows = graph.shape(inputs).rows;
    let found = graph.shape(inputs).cols;
    if found != spec.input_dim {
        return Err(ModelError::InputDim { expected: spec.input_dim, found });
    }
    let p = graph.shape(params).len();
    if p != spec.param_count() {
        return Err(ModelError::ParamCount { expected: spec.param_count(), found: p });
    }
    let layers = spec.layers();
    let mut h = inputs;
    let mut offset = 0;
    for (l, &(fi, fo)) in layers.iter().enumerate() {
        let w = graph.slice(params, offset, Shape::new(fi, fo))?;
        let b = graph.slice(params, offset + fi * fo, Shape::new(1, fo))?;
        offset += (fi + 1) * fo;
        let z = graph.matmul(h, w)?;
        let bb = graph.broadcast(b, Shape::new(rows, fo))?;
        h = graph.add(z, bb)?;
        if l + 1 < layers.len() {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}

/// Mean cross-entropy node.
pub fn build_loss(
    graph: &mut Graph,
    spec: &ModelSpec,
    params: NodeId,
    inputs: NodeId,
    targets: NodeId,
) -> Result<NodeId, ModelError> {
    let logits = build_logits(graph, spec, params, inputs)?;
    Ok(graph.softmax_cross_entropy(logits, targets)?)
}

fn check_batch(spec: &ModelSpec, params: &ParameterVector, batch: &LabeledBatch) -> Result<(), ModelError> {
    params.check_len(spec)?;
    if batch.dim() != spec.input_dim {
        return Err(ModelError::InputDim { expected: spec.input_dim, found: batch.dim() });
    }
    Ok(())
}

pub fn forward_logits(spec: &ModelSpec, params: &ParameterVector, inputs: &Tensor) -> Result<Tensor, ModelError> {
    params.check_len(spec)?;
    let mut g = Graph::new();
    let p = g.input("params", Shape::column(spec.param_count()))?;
    let x = g.input("x", inputs.shape())?;
    let logits = build_logits(&mut g, spec, p, x)?;
    let mut s = Session::with_inputs(&g, [("params", params.to_tensor()), ("x", inputs.clone())])?;
    Ok(s.eval(logits)?.clone())
}

pub fn loss(spec: &ModelSpec, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    check_batch(spec, params, batch)?;
    let mut g = Graph::new();
    let p = g.input("params", Shape::column(spec.param_count()))?;
    let x = g.input("x", batch.features.shape())?;
    let y = g.input("y", Shape::new(batch.len(), spec.n_way))?;
    let l = build_loss(&mut g, spec, p, x, y)?;
    let mut s = Session::with_inputs(
        &g,
        [("params", params.to_tensor()), ("x", batch.features.clone()), ("y", batch.one_hot(spec.n_way)?)],
    )?;
    Ok(s.scalar(l)?)
}

/// Loss and its gradient w.r.t. the parameters.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &LabeledBatch,
) -> Result<(f64, ParameterVector), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    check_batch(spec, params, batch)?;
    let mut g = Graph::new();
    let p = g.input("params", Shape::column(spec.param_count()))?;
    let x = g.input("x", batch.features.shape())?;
    let y = g.input("y", Shape::new(batch.len(), spec.n_way))?;
    let l = build_loss(&mut g, spec, p, x, y)?;
    let d = g.gradient(l, &[p], false)?.result[0];
    let out = g.forward(
        [("params", params.to_tensor()), ("x", batch.features.clone()), ("y", batch.one_hot(spec.n_way)?)],
        &[l, d],
    )?;
    let mut out = out.into_iter();
    let l = out.next().expect("loss").item();
    Ok((l, ParameterVector(out.next().expect("grad").into_data())))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape().rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
