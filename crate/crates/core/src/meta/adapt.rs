use crate::model::{ModelSpec, ParameterVector};
use crate::tasks::Episode;

use super::program::{build_inner_loop, episode_feed};
use super::{AdaptProgram, MetaError};
use crate::autodiff::{Graph, Session, Shape};

/// One task's inner-loop run from a shared start point.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationTrace {
    pub start: ParameterVector,
    /// `theta^(1) .. theta^(T)`; may be empty when only endpoints were kept.
    pub iterates: Vec<ParameterVector>,
    pub solution: ParameterVector,
    pub displacement: ParameterVector,
    /// Unit displacement; `None` when the displacement is exactly zero.
    pub direction: Option<ParameterVector>,
    /// Support loss at `theta^(0) .. theta^(T)`.
    pub support_losses: Vec<f64>,
}

/// `v / |v|`, or `None` for the zero vector.
pub fn unit_direction(v: &[f64]) -> Option<ParameterVector> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| ParameterVector::new(v.iter().map(|x| x / norm).collect()))
}

impl AdaptationTrace {
    pub fn new(
        start: ParameterVector,
        iterates: Vec<ParameterVector>,
        solution: ParameterVector,
        support_losses: Vec<f64>,
    ) -> Self {
        let displacement: ParameterVector =
            solution.iter().zip(start.iter()).map(|(s, t)| s - t).collect::<Vec<_>>().into();
        let direction = unit_direction(&displacement);
        Self { start, iterates, solution, displacement, direction, support_losses }
    }

    pub fn trajectory_norm(&self) -> f64 {
        self.displacement.norm()
    }

    pub fn final_support_loss(&self) -> f64 {
        *self.support_losses.last().expect("support losses recorded")
    }
}

/// Runs `steps` full-batch gradient steps of size `alpha` on the episode's
/// support loss starting from `start`.
///
/// With `differentiable` set the trace is computed through the same graph
/// shape the second-order meta-gradient uses; values are identical either
/// way.
pub fn inner_adapt(
    spec: &ModelSpec,
    start: &ParameterVector,
    episode: &Episode,
    alpha: f64,
    steps: usize,
    differentiable: bool,
) -> Result<AdaptationTrace, MetaError> {
    if episode.support.is_empty() {
        return Err(MetaError::EmptyEpisode);
    }
    if !differentiable {
        let program = AdaptProgram::for_episode(spec, episode, alpha, steps)?;
        let mut session = program.session(start, episode)?;
        let iterates = session.eval_many(&program.inner.iterates)?;
        let losses = session.eval_many(&program.inner.support_losses)?;
        return Ok(collect_trace(start, iterates, losses));
    }
    let mut graph = Graph::new();
    let theta = graph.input(super::program::THETA, Shape::column(spec.param_count()))?;
    let sx = graph.input(super::program::SUPPORT_X, episode.support.features.shape())?;
    let sy = graph.input(super::program::SUPPORT_Y, Shape::new(episode.support.len(), spec.n_way))?;
    let inner = build_inner_loop(&mut graph, spec, theta, sx, sy, alpha, steps, true)?;
    let feed = episode_feed(spec, start, episode)?
        .into_iter()
        .filter(|(name, _)| graph.input_id(name).is_some());
    let mut session = Session::with_inputs(&graph, feed)?;
    let iterates = session.eval_many(&inner.iterates)?;
    let losses = session.eval_many(&inner.support_losses)?;
    Ok(collect_trace(start, iterates, losses))
}

fn collect_trace(
    start: &ParameterVector,
    iterates: Vec<crate::autodiff::Tensor>,
    losses: Vec<crate::autodiff::Tensor>,
) -> AdaptationTrace {
    let iterates: Vec<ParameterVector> = iterates.into_iter().map(|t| t.into_data().into()).collect();
    let solution = iterates.last().expect("steps >= 1").clone();
    let losses = losses.iter().map(|t| t.item()).collect();
    AdaptationTrace::new(start.clone(), iterates, solution, losses)
}
