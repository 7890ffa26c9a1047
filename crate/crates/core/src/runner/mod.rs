//! Experiment orchestration: configs, training with per-epoch evaluation,
//! checkpoints, metric logs and SVG plots.

pub mod checkpoint;
mod config;
mod manifest;
pub mod metrics;
pub mod plot;
mod train;

use std::path::Path;

use thiserror::Error;

use crate::landscape::MetricError;
use crate::meta::MetaError;
use crate::tasks::TaskError;

pub use config::{Algorithm, EvalSection, ExperimentConfig, Seeds, TaskSection, SEED_ENV};
pub use manifest::{RunManifest, RunStatus, Timings};
pub use metrics::MetricRecord;
pub use train::{
    eval_sets, evaluate, run_eval, run_train, EpochDiagnostics, EvalSets, TrainOptions,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

impl RunnerError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        RunnerError::Io(format!("{}: {e}", path.display()))
    }

    /// 1 for configuration, file and checkpoint problems, 2 for numeric
    /// failures during training or evaluation.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Io(_) | RunnerError::Checkpoint(_) | RunnerError::Task(_) => 1,
            RunnerError::Meta(MetaError::InvalidHyper(_)) => 1,
            RunnerError::Numeric(_) | RunnerError::Meta(_) | RunnerError::Metric(_) => 2,
        }
    }
}
