use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunnerError;

/// One evaluation of the meta-learned point after an epoch (epoch 0 is the
/// initialization). `trajectory_coherence` is null when fewer than two
/// adaptation directions were defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub epoch: usize,
    pub avg_target_accuracy: f64,
    pub avg_support_loss: f64,
    pub avg_spectral_norm: f64,
    pub trajectory_coherence: Option<f64>,
    pub gradient_coherence: f64,
    pub avg_trajectory_norm: f64,
    /// Tasks behind each metric, in the order of the fields above.
    pub n_tasks_per_metric: Vec<usize>,
    pub undefined_direction_count: usize,
}

pub const FIELDS: [&str; 9] = [
    "epoch",
    "avg_target_accuracy",
    "avg_support_loss",
    "avg_spectral_norm",
    "trajectory_coherence",
    "gradient_coherence",
    "avg_trajectory_norm",
    "n_tasks_per_metric",
    "undefined_direction_count",
];

/// Fields that can be plotted against the epoch.
pub const NUMERIC_FIELDS: [&str; 7] = [
    "avg_target_accuracy",
    "avg_support_loss",
    "avg_spectral_norm",
    "trajectory_coherence",
    "gradient_coherence",
    "avg_trajectory_norm",
    "undefined_direction_count",
];

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn csv_header() -> String {
        FIELDS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let tasks: Vec<String> = self.n_tasks_per_metric.iter().map(|n| n.to_string()).collect();
        [
            self.epoch.to_string(),
            self.avg_target_accuracy.to_string(),
            self.avg_support_loss.to_string(),
            self.avg_spectral_norm.to_string(),
            self.trajectory_coherence.map(|v| v.to_string()).unwrap_or_default(),
            self.gradient_coherence.to_string(),
            self.avg_trajectory_norm.to_string(),
            tasks.join(";"),
            self.undefined_direction_count.to_string(),
        ]
        .join(",")
    }

    pub fn field(&self, name: &str) -> Option<Option<f64>> {
        Some(match name {
            "epoch" => Some(self.epoch as f64),
            "avg_target_accuracy" => Some(self.avg_target_accuracy),
            "avg_support_loss" => Some(self.avg_support_loss),
            "avg_spectral_norm" => Some(self.avg_spectral_norm),
            "trajectory_coherence" => self.trajectory_coherence,
            "gradient_coherence" => Some(self.gradient_coherence),
            "avg_trajectory_norm" => Some(self.avg_trajectory_norm),
            "undefined_direction_count" => Some(self.undefined_direction_count as f64),
            _ => return None,
        })
    }
}

/// Appends records to `metrics.jsonl` and `metrics.csv` in step.
pub struct MetricsWriter {
    jsonl: File,
    csv: File,
}

impl MetricsWriter {
    /// Truncates both files and writes the CSV header.
    pub fn create(jsonl: &Path, csv: &Path) -> Result<Self, RunnerError> {
        let j = File::create(jsonl).map_err(|e| RunnerError::io(jsonl, e))?;
        let mut c = File::create(csv).map_err(|e| RunnerError::io(csv, e))?;
        writeln!(c, "{}", MetricRecord::csv_header()).map_err(|e| RunnerError::io(csv, e))?;
        Ok(Self { jsonl: j, csv: c })
    }

    /// Keeps the records with `epoch <= last_epoch` (as raw lines) and
    /// reopens both files for appending.
    pub fn resume(jsonl: &Path, csv: &Path, last_epoch: usize) -> Result<Self, RunnerError> {
        let keep = last_epoch + 1;
        let lines = read_lines(jsonl)?;
        if lines.len() < keep {
            return Err(RunnerError::Checkpoint(format!(
                "{} has {} records, resuming needs {keep}",
                jsonl.display(),
                lines.len()
            )));
        }
        for (i, l) in lines[..keep].iter().enumerate() {
            let r: MetricRecord = serde_json::from_str(l)
                .map_err(|e| RunnerError::Checkpoint(format!("{} line {}: {e}", jsonl.display(), i + 1)))?;
            if r.epoch != i {
                return Err(RunnerError::Checkpoint(format!("{} line {} has epoch {}", jsonl.display(), i + 1, r.epoch)));
            }
        }
        let csv_lines = read_lines(csv)?;
        if csv_lines.len() < keep + 1 {
            return Err(RunnerError::Checkpoint(format!("{} is shorter than {}", csv.display(), jsonl.display())));
        }
        rewrite(jsonl, &lines[..keep])?;
        rewrite(csv, &csv_lines[..keep + 1])?;
        let open = |p: &Path| File::options().append(true).open(p).map_err(|e| RunnerError::io(p, e));
        Ok(Self { jsonl: open(jsonl)?, csv: open(csv)? })
    }

    pub fn append(&mut self, r: &MetricRecord) -> Result<(), RunnerError> {
        let io = |e: std::io::Error| RunnerError::Io(format!("writing metrics: {e}"));
        writeln!(self.jsonl, "{}", r.to_json_line()).map_err(io)?;
        writeln!(self.csv, "{}", r.to_csv_row()).map_err(io)?;
        self.jsonl.flush().map_err(io)?;
        self.csv.flush().map_err(io)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, RunnerError> {
    let f = File::open(path).map_err(|e| RunnerError::io(path, e))?;
    BufReader::new(f).lines().collect::<Result<_, _>>().map_err(|e| RunnerError::io(path, e))
}

fn rewrite(path: &Path, lines: &[String]) -> Result<(), RunnerError> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| RunnerError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>, RunnerError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| RunnerError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
