use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, RunnerError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix: u64,
    /// Wall-clock seconds per epoch, training plus evaluation.
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub parallel: bool,
    pub status: RunStatus,
    /// Paths relative to the run directory.
    pub metrics_file: String,
    pub metrics_csv: String,
    pub diagnostics_file: String,
    pub checkpoints: Vec<String>,
    pub error: Option<String>,
    pub timings: Timings,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            config,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            parallel: crate::par::is_parallel(),
            status: RunStatus::Running,
            metrics_file: "metrics.jsonl".into(),
            metrics_csv: "metrics.csv".into(),
            diagnostics_file: "diagnostics.jsonl".into(),
            checkpoints: Vec::new(),
            error: None,
            timings: Timings { started_unix, ..Default::default() },
        }
    }

    pub fn load(dir: &Path) -> Result<Self, RunnerError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| RunnerError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), RunnerError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| RunnerError::io(&path, e))
    }
}
