//! Inner-loop adaptation, MAML meta-updates (second and first order), the
//! trajectory-coherence regularized variant, the finetuning baseline and
//! meta-test evaluation.

mod adam;
mod adapt;
mod evaluate;
mod finetune;
mod maml;
mod program;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use adapt::{inner_adapt, unit_direction, AdaptationTrace};
pub use evaluate::{meta_test_evaluate, EvalOptions, HeadReplacement, MetaTestOutcome, TaskOutcome};
pub use finetune::{finetune_train_epoch, FinetuneConfig};
pub use maml::{
    maml_meta_gradient, meta_gradient_with_offsets, meta_step, regularized_meta_step, MetaGradient,
    RegularizerDiagnostics,
};
pub use program::{build_inner_loop, AdaptProgram, InnerLoopNodes, MetaProgram};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::model::ModelError;
use crate::tasks::TaskError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("episode has an empty support or target set")]
    EmptyEpisode,
    #[error("no episodes to evaluate")]
    NoEpisodes,
    #[error("episode sizes (support, target, dim) {found:?} differ from {expected:?}")]
    EpisodeShape { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("expected a batch of {expected} tasks, got {found}")]
    BatchSize { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Second,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Inner-loop step size.
    pub alpha: f64,
    /// Meta (ADAM) learning rate.
    pub beta: f64,
    /// Inner gradient steps.
    pub inner_steps: usize,
    /// Tasks per meta-batch.
    pub meta_batch: usize,
    /// Trajectory-coherence regularization strength; 0 is plain MAML.
    pub gamma: f64,
    pub order: Order,
    pub adam: AdamConfig,
    /// Exclude task `i` from the mean direction used to correct task `i`.
    pub leave_one_out: bool,
    pub finetune: FinetuneConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.001,
            inner_steps: 5,
            meta_batch: 4,
            gamma: 0.0,
            order: Order::Second,
            adam: AdamConfig::default(),
            leave_one_out: false,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), MetaError> {
        // alpha = 0 is allowed: it is the degenerate identity inner loop.
        let ok = self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.beta > 0.0
            && self.inner_steps >= 1
            && self.meta_batch >= 1
            && self.gamma >= 0.0
            && self.gamma.is_finite();
        if !ok {
            return Err(MetaError::InvalidHyper(format!(
                "need alpha >= 0, beta > 0, T >= 1, n >= 1, gamma >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}
