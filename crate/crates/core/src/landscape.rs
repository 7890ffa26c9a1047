//! Objective-landscape measurements around meta-test adaptation: Hessian
//! spectral norm at adapted solutions, coherence of adaptation directions,
//! coherence of support gradients at the meta-train point, trajectory
//! lengths and attained support loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, HvpNodes, HvpOperator, NodeId, Session, Shape};
use crate::meta::AdaptationTrace;
use crate::model::{build_loss, LabeledBatch, ModelError, ModelSpec, ParameterVector};
use crate::par;
use crate::tasks::Episode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric over an empty set")]
    Empty,
    #[error("need at least {needed} usable items, got {found}")]
    TooFew { needed: usize, found: usize },
    #[error("invalid power iteration settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerIterationConfig {
    /// Relative change in the estimate that counts as converged.
    pub tol: f64,
    pub max_iters: usize,
    /// Seed of the starting vector.
    pub seed: u64,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 500, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    /// Largest |eigenvalue|.
    pub norm: f64,
    /// Rayleigh quotient of the final iterate; its sign is the sign of the
    /// dominant eigenvalue.
    pub rayleigh: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration `v <- Av / |Av|` for a symmetric operator given only
/// through products. The estimate is `|A v|` for unit `v`, which converges
/// to the largest-magnitude eigenvalue even when `+l` and `-l` tie.
pub fn power_iteration<E>(
    dim: usize,
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    cfg: &PowerIterationConfig,
) -> Result<SpectralEstimate, E>
where
    E: From<MetricError>,
{
    if !(cfg.tol > 0.0) || cfg.max_iters == 0 {
        return Err(MetricError::InvalidSettings(format!("tol {} max_iters {}", cfg.tol, cfg.max_iters)).into());
    }
    if dim == 0 {
        return Err(MetricError::Empty.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut prev = f64::NAN;
    let mut last = SpectralEstimate { norm: 0.0, rayleigh: 0.0, iterations: 0, converged: false };
    for k in 1..=cfg.max_iters {
        let w = apply(&v)?;
        let est = norm(&w);
        let rayleigh = dot(&v, &w);
        last = SpectralEstimate { norm: est, rayleigh, iterations: k, converged: false };
        if est == 0.0 {
            last.converged = true;
            return Ok(last);
        }
        if k > 1 && (est - prev).abs() <= cfg.tol * est {
            last.converged = true;
            return Ok(last);
        }
        prev = est;
        v = w.into_iter().map(|x| x / est).collect();
    }
    Ok(last)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Support-loss Hessian-vector product graph for one support size.
pub struct HessianProgram {
    spec: ModelSpec,
    graph: Graph,
    nodes: HvpNodes,
    loss: NodeId,
    n_support: usize,
}

impl HessianProgram {
    pub fn build(spec: &ModelSpec, n_support: usize) -> Result<Self, MetricError> {
        let mut graph = Graph::new();
        let theta = graph.input("theta", Shape::column(spec.param_count()))?;
        let x = graph.input("x", Shape::new(n_support, spec.input_dim))?;
        let y = graph.input("y", Shape::new(n_support, spec.n_way))?;
        let loss = build_loss(&mut graph, spec, theta, x, y)?;
        let nodes = graph.hvp_nodes(loss, theta, "v")?;
        Ok(Self { spec: spec.clone(), graph, nodes, loss, n_support })
    }

    /// HVP operator at `params` on `support`.
    pub fn operator(&self, params: &ParameterVector, support: &LabeledBatch) -> Result<HvpOperator<'_>, MetricError> {
        params.check_len(&self.spec)?;
        if support.is_empty() {
            return Err(MetricError::Empty);
        }
        if support.len() != self.n_support {
            return Err(MetricError::Autodiff(AutodiffError::DimensionMismatch {
                expected: self.n_support,
                found: support.len(),
            }));
        }
        let session = Session::with_inputs(
            &self.graph,
            [
                ("theta", params.to_tensor()),
                ("x", support.features.clone()),
                ("y", support.one_hot(self.spec.n_way)?),
            ],
        )?;
        Ok(HvpOperator::new(session, self.nodes.clone()))
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn spectral_norm(
        &self,
        params: &ParameterVector,
        support: &LabeledBatch,
        cfg: &PowerIterationConfig,
    ) -> Result<SpectralEstimate, MetricError> {
        let mut op = self.operator(params, support)?;
        let dim = op.dim();
        power_iteration(dim, |v| op.apply(v).map_err(MetricError::from), cfg)
    }
}

/// Spectral norm of the support-loss Hessian at `params`.
pub fn spectral_norm(
    spec: &ModelSpec,
    params: &ParameterVector,
    support: &LabeledBatch,
    cfg: &PowerIterationConfig,
) -> Result<SpectralEstimate, MetricError> {
    HessianProgram::build(spec, support.len())?.spectral_norm(params, support, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSummary {
    pub mean: f64,
    pub estimates: Vec<SpectralEstimate>,
}

impl SpectralSummary {
    pub fn not_converged(&self) -> usize {
        self.estimates.iter().filter(|e| !e.converged).count()
    }

    pub fn negative_dominant(&self) -> usize {
        self.estimates.iter().filter(|e| e.rayleigh < 0.0).count()
    }
}

/// Mean Hessian spectral norm at each trace's solution, on the matching
/// episode's support set. `spec` must be the spec the traces live in.
pub fn avg_spectral_norm(
    spec: &ModelSpec,
    traces: &[&AdaptationTrace],
    episodes: &[Episode],
    cfg: &PowerIterationConfig,
) -> Result<SpectralSummary, MetricError> {
    if traces.is_empty() {
        return Err(MetricError::Empty);
    }
    if traces.len() != episodes.len() {
        return Err(MetricError::TooFew { needed: traces.len(), found: episodes.len() });
    }
    let program = HessianProgram::build(spec, episodes[0].support.len())?;
    let pairs: Vec<(&AdaptationTrace, &Episode)> = traces.iter().copied().zip(episodes).collect();
    let estimates = par::map_collect(&pairs, |(t, e)| program.spectral_norm(&t.solution, &e.support, cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mean = estimates.iter().map(|e| e.norm).sum::<f64>() / estimates.len() as f64;
    Ok(SpectralSummary { mean, estimates })
}

/// Mean inner product over pairs, from `|sum v|^2` and `sum |v|^2`:
/// distinct pairs give `(|S|^2 - sum |v_i|^2) / (n (n-1))`, and with
/// `include_self` every ordered pair counts, `|S|^2 / n^2`.
pub fn mean_pairwise_inner_product<V: AsRef<[f64]>>(vectors: &[V], include_self: bool) -> Result<f64, MetricError> {
    let n = vectors.len();
    let needed = if include_self { 1 } else { 2 };
    if n < needed {
        return Err(MetricError::TooFew { needed, found: n });
    }
    let dim = vectors[0].as_ref().len();
    let mut sum = vec![0.0; dim];
    let mut sq = 0.0;
    for v in vectors {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(MetricError::Autodiff(AutodiffError::DimensionMismatch { expected: dim, found: v.len() }));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        sq += dot(v, v);
    }
    let total = dot(&sum, &sum);
    let nf = n as f64;
    Ok(if include_self { total / (nf * nf) } else { (total - sq) / (nf * (nf - 1.0)) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryCoherence {
    pub value: f64,
    pub used: usize,
    pub undefined: usize,
}

/// Mean cosine between adaptation directions over distinct pairs. Traces
/// with zero displacement are excluded and counted.
pub fn trajectory_coherence(traces: &[&AdaptationTrace], include_self: bool) -> Result<TrajectoryCoherence, MetricError> {
    let dirs: Vec<&ParameterVector> = traces.iter().filter_map(|t| t.direction.as_ref()).collect();
    let undefined = traces.len() - dirs.len();
    if dirs.len() < 2 {
        return Err(MetricError::TooFew { needed: 2, found: dirs.len() });
    }
    let dirs: Vec<&[f64]> = dirs.iter().map(|d| &d[..]).collect();
    let value = mean_pairwise_inner_product(&dirs, include_self)?;
    Ok(TrajectoryCoherence { value, used: dirs.len(), undefined })
}

/// `g_i = -grad L(support_i; theta)` for every episode.
pub fn meta_test_gradients(
    spec: &ModelSpec,
    theta: &ParameterVector,
    episodes: &[Episode],
) -> Result<Vec<ParameterVector>, MetricError> {
    let first = episodes.first().ok_or(MetricError::Empty)?;
    theta.check_len(spec)?;
    let mut graph = Graph::new();
    let p = graph.input("theta", Shape::column(spec.param_count()))?;
    let x = graph.input("x", Shape::new(first.support.len(), spec.input_dim))?;
    let y = graph.input("y", Shape::new(first.support.len(), spec.n_way))?;
    let loss = build_loss(&mut graph, spec, p, x, y)?;
    let grad = graph.gradient(loss, &[p], false)?.result[0];
    par::map_collect(episodes, |e| -> Result<ParameterVector, MetricError> {
        let mut s = Session::with_inputs(
            &graph,
            [("theta", theta.to_tensor()), ("x", e.support.features.clone()), ("y", e.support.one_hot(spec.n_way)?)],
        )?;
        Ok(s.eval(grad)?.data().iter().map(|g| -g).collect::<Vec<_>>().into())
    })
    .into_iter()
    .collect()
}

/// Mean inner product between meta-test gradients at `theta` over distinct
/// episode pairs (full gradients, not normalized).
pub fn gradient_coherence(spec: &ModelSpec, theta: &ParameterVector, episodes: &[Episode]) -> Result<f64, MetricError> {
    if episodes.len() < 2 {
        return Err(MetricError::TooFew { needed: 2, found: episodes.len() });
    }
    let grads = meta_test_gradients(spec, theta, episodes)?;
    mean_pairwise_inner_product(&grads, false)
}

/// Mean and population standard deviation of `|solution - start|`.
pub fn trajectory_norm_stats(traces: &[&AdaptationTrace]) -> Result<(f64, f64), MetricError> {
    if traces.is_empty() {
        return Err(MetricError::Empty);
    }
    let norms: Vec<f64> = traces.iter().map(|t| t.trajectory_norm()).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean support loss attained at the adapted solutions.
pub fn support_loss_stats(traces: &[&AdaptationTrace]) -> Result<f64, MetricError> {
    if traces.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(traces.iter().map(|t| t.final_support_loss()).sum::<f64>() / traces.len() as f64)
}
