use crate::autodiff::Tensor;
use crate::model::{accuracy, replace_head, ModelSpec, ParameterVector};
use crate::par;
use crate::tasks::{derive_seed, Episode};

use super::{AdaptProgram, AdaptationTrace, MetaError};

/// What happens to the output layer before adapting to a meta-test task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadReplacement {
    /// Use the meta-learned parameters as they are.
    Keep,
    /// Swap in a Xavier-initialized `n_way` head, seeded per episode from
    /// this seed and the episode's seed path (finetune baseline).
    Replace { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Keep every inner iterate in the traces, not only start and solution.
    pub keep_iterates: bool,
    pub keep_logits: bool,
    /// Keep the support-loss gradient at the start point.
    pub keep_start_gradient: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { keep_iterates: false, keep_logits: true, keep_start_gradient: true }
    }
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub trace: AdaptationTrace,
    pub accuracy: f64,
    pub target_logits: Option<Tensor>,
    pub start_gradient: Option<ParameterVector>,
}

#[derive(Clone, Debug)]
pub struct MetaTestOutcome {
    /// Mean target accuracy, summed in episode order.
    pub avg_target_accuracy: f64,
    /// Spec the tasks were adapted with (the replaced head's for the baseline).
    pub spec: ModelSpec,
    pub tasks: Vec<TaskOutcome>,
}

pub(crate) fn head_seed(seed: u64, episode: &Episode) -> u64 {
    derive_seed(&[seed, 0x6865_6164, episode.id.path.epoch, episode.id.path.index])
}

/// Adapts `theta` to each episode's support set (no meta-gradient graph)
/// and scores the adapted solution on the target set.
pub fn meta_test_evaluate(
    spec: &ModelSpec,
    theta: &ParameterVector,
    episodes: &[Episode],
    alpha: f64,
    steps: usize,
    head: HeadReplacement,
    opts: EvalOptions,
) -> Result<MetaTestOutcome, MetaError> {
    let first = episodes.first().ok_or(MetaError::NoEpisodes)?;
    theta.check_len(spec)?;
    let task_spec = match head {
        HeadReplacement::Keep => {
            if first.n_way != spec.n_way {
                return Err(MetaError::InvalidHyper(format!(
                    "{}-way episodes for a {}-way model without head replacement",
                    first.n_way, spec.n_way
                )));
            }
            spec.clone()
        }
        HeadReplacement::Replace { .. } => spec.with_way(first.n_way),
    };
    let program = AdaptProgram::for_episode(&task_spec, first, alpha, steps)?;
    let results = par::map_collect(episodes, |episode| -> Result<TaskOutcome, MetaError> {
        let start = match head {
            HeadReplacement::Keep => theta.clone(),
            HeadReplacement::Replace { seed } => {
                replace_head(spec, theta, episode.n_way, head_seed(seed, episode))?.1
            }
        };
        let mut session = program.session(&start, episode)?;
        let iterates = session.eval_many(&program.inner.iterates)?;
        let losses: Vec<f64> = session
            .eval_many(&program.inner.support_losses)?
            .iter()
            .map(|t| t.item())
            .collect();
        let logits = session.eval(program.target_logits)?.clone();
        let start_gradient = if opts.keep_start_gradient {
            Some(ParameterVector::new(session.eval(program.inner.first_gradient)?.data().to_vec()))
        } else {
            None
        };
        let mut iterates: Vec<ParameterVector> = iterates.into_iter().map(|t| t.into_data().into()).collect();
        let solution = iterates.last().expect("steps >= 1").clone();
        if !opts.keep_iterates {
            iterates.clear();
        }
        let acc = accuracy(&logits, &episode.target.labels);
        Ok(TaskOutcome {
            trace: AdaptationTrace::new(start, iterates, solution, losses),
            accuracy: acc,
            target_logits: opts.keep_logits.then_some(logits),
            start_gradient,
        })
    });
    let tasks: Vec<TaskOutcome> = results.into_iter().collect::<Result<_, _>>()?;
    let avg = tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64;
    Ok(MetaTestOutcome { avg_target_accuracy: avg, spec: task_spec, tasks })
}
