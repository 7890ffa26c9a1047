//! Prebuilt graphs for one task's adaptation and meta-objective.
//!
//! A program is built once per shape configuration and evaluated per task
//! through its own [`Session`], so many tasks can share one graph across
//! threads.

use crate::autodiff::{Graph, NodeId, Session, Shape, Tensor};
use crate::model::{build_logits, build_loss, ModelSpec, ParameterVector};
use crate::tasks::Episode;

use super::MetaError;

pub(crate) const THETA: &str = "theta";
pub(crate) const SUPPORT_X: &str = "support_x";
pub(crate) const SUPPORT_Y: &str = "support_y";
pub(crate) const TARGET_X: &str = "target_x";
pub(crate) const TARGET_Y: &str = "target_y";
pub(crate) const OFFSET: &str = "offset";

/// Nodes of a `steps`-step gradient-descent inner loop.
#[derive(Clone, Debug)]
pub struct InnerLoopNodes {
    /// Support gradient at the start point.
    pub first_gradient: NodeId,
    /// `theta^(1) .. theta^(T)`.
    pub iterates: Vec<NodeId>,
    /// Support loss at `theta^(0) .. theta^(T)`.
    pub support_losses: Vec<NodeId>,
}

impl InnerLoopNodes {
    pub fn solution(&self) -> NodeId {
        *self.iterates.last().expect("at least one step")
    }
}

/// Appends `theta^(t+1) = theta^(t) - alpha * grad L(support; theta^(t))` for
/// `steps` steps. With `differentiable` unset the step gradients are
/// detached, so d(solution)/d(start) is the identity (first-order MAML).
#[allow(clippy::too_many_arguments)]
pub fn build_inner_loop(
    graph: &mut Graph,
    spec: &ModelSpec,
    theta: NodeId,
    support_x: NodeId,
    support_y: NodeId,
    alpha: f64,
    steps: usize,
    differentiable: bool,
) -> Result<InnerLoopNodes, MetaError> {
    if steps == 0 {
        return Err(MetaError::InvalidHyper("inner steps must be >= 1".into()));
    }
    let mut current = theta;
    let mut iterates = Vec::with_capacity(steps);
    let mut support_losses = Vec::with_capacity(steps + 1);
    let mut first_gradient = None;
    for _ in 0..steps {
        let loss = build_loss(graph, spec, current, support_x, support_y)?;
        support_losses.push(loss);
        let grad = graph.gradient(loss, &[current], differentiable)?.result[0];
        first_gradient.get_or_insert(grad);
        let step = graph.scale(grad, alpha)?;
        current = graph.sub(current, step)?;
        iterates.push(current);
    }
    support_losses.push(build_loss(graph, spec, current, support_x, support_y)?);
    Ok(InnerLoopNodes {
        first_gradient: first_gradient.expect("steps >= 1"),
        iterates,
        support_losses,
    })
}

fn declare_episode_inputs(
    graph: &mut Graph,
    spec: &ModelSpec,
    n_support: usize,
    n_target: usize,
) -> Result<[NodeId; 5], MetaError> {
    let theta = graph.input(THETA, Shape::column(spec.param_count()))?;
    let sx = graph.input(SUPPORT_X, Shape::new(n_support, spec.input_dim))?;
    let sy = graph.input(SUPPORT_Y, Shape::new(n_support, spec.n_way))?;
    let tx = graph.input(TARGET_X, Shape::new(n_target, spec.input_dim))?;
    let ty = graph.input(TARGET_Y, Shape::new(n_target, spec.n_way))?;
    Ok([theta, sx, sy, tx, ty])
}

pub(crate) fn episode_feed(
    spec: &ModelSpec,
    theta: &ParameterVector,
    episode: &Episode,
) -> Result<Vec<(&'static str, Tensor)>, MetaError> {
    theta.check_len(spec)?;
    Ok(vec![
        (THETA, theta.to_tensor()),
        (SUPPORT_X, episode.support.features.clone()),
        (SUPPORT_Y, episode.support.one_hot(spec.n_way)?),
        (TARGET_X, episode.target.features.clone()),
        (TARGET_Y, episode.target.one_hot(spec.n_way)?),
    ])
}

fn check_sizes(spec: &ModelSpec, n_support: usize, n_target: usize, e: &Episode) -> Result<(), MetaError> {
    if e.support.is_empty() || e.target.is_empty() {
        return Err(MetaError::EmptyEpisode);
    }
    if e.support.len() != n_support || e.target.len() != n_target || e.support.dim() != spec.input_dim {
        return Err(MetaError::EpisodeShape {
            expected: (n_support, n_target, spec.input_dim),
            found: (e.support.len(), e.target.len(), e.support.dim()),
        });
    }
    Ok(())
}

/// Adaptation of one task plus target logits at the adapted solution.
#[derive(Debug)]
pub struct AdaptProgram {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub inner: InnerLoopNodes,
    pub target_logits: NodeId,
    n_support: usize,
    n_target: usize,
}

impl AdaptProgram {
    pub fn build(
        spec: &ModelSpec,
        n_support: usize,
        n_target: usize,
        alpha: f64,
        steps: usize,
    ) -> Result<Self, MetaError> {
        let mut graph = Graph::new();
        let [theta, sx, sy, tx, _] = declare_episode_inputs(&mut graph, spec, n_support, n_target)?;
        let inner = build_inner_loop(&mut graph, spec, theta, sx, sy, alpha, steps, false)?;
        let target_logits = build_logits(&mut graph, spec, inner.solution(), tx)?;
        Ok(Self { spec: spec.clone(), graph, inner, target_logits, n_support, n_target })
    }

    pub fn for_episode(spec: &ModelSpec, e: &Episode, alpha: f64, steps: usize) -> Result<Self, MetaError> {
        Self::build(spec, e.support.len(), e.target.len(), alpha, steps)
    }

    pub fn session(&self, theta: &ParameterVector, episode: &Episode) -> Result<Session<'_>, MetaError> {
        check_sizes(&self.spec, self.n_support, self.n_target, episode)?;
        Ok(Session::with_inputs(&self.graph, episode_feed(&self.spec, theta, episode)?)?)
    }
}

/// Target loss at the (optionally offset) adapted solution and its gradient
/// w.r.t. the start point, differentiated through the inner loop when
/// `second_order` is set.
#[derive(Debug)]
pub struct MetaProgram {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub inner: InnerLoopNodes,
    pub target_loss: NodeId,
    pub meta_gradient: NodeId,
    n_support: usize,
    n_target: usize,
}

impl MetaProgram {
    pub fn build(
        spec: &ModelSpec,
        n_support: usize,
        n_target: usize,
        alpha: f64,
        steps: usize,
        second_order: bool,
    ) -> Result<Self, MetaError> {
        let mut graph = Graph::new();
        let [theta, sx, sy, tx, ty] = declare_episode_inputs(&mut graph, spec, n_support, n_target)?;
        let inner = build_inner_loop(&mut graph, spec, theta, sx, sy, alpha, steps, second_order)?;
        // Constant correction added to the solution; never differentiated.
        let offset = graph.input(OFFSET, Shape::column(spec.param_count()))?;
        let corrected = graph.add(inner.solution(), offset)?;
        let target_loss = build_loss(&mut graph, spec, corrected, tx, ty)?;
        let meta_gradient = graph.gradient(target_loss, &[theta], false)?.result[0];
        Ok(Self { spec: spec.clone(), graph, inner, target_loss, meta_gradient, n_support, n_target })
    }

    pub fn for_episode(
        spec: &ModelSpec,
        e: &Episode,
        alpha: f64,
        steps: usize,
        second_order: bool,
    ) -> Result<Self, MetaError> {
        Self::build(spec, e.support.len(), e.target.len(), alpha, steps, second_order)
    }

    /// Session with everything but the offset fed.
    pub fn session(&self, theta: &ParameterVector, episode: &Episode) -> Result<Session<'_>, MetaError> {
        check_sizes(&self.spec, self.n_support, self.n_target, episode)?;
        Ok(Session::with_inputs(&self.graph, episode_feed(&self.spec, theta, episode)?)?)
    }
}
