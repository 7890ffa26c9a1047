use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::landscape::PowerIterationConfig;
use crate::meta::{HyperParams, Order};
use crate::model::ModelSpec;
use crate::tasks::TaskDistributionConfig;

use super::RunnerError;

/// Environment variable that replaces `seeds.master`.
pub const SEED_ENV: &str = "METALAND_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Maml,
    Fomaml,
    MamlReg,
    Finetune,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Maml => "maml",
            Algorithm::Fomaml => "fomaml",
            Algorithm::MamlReg => "maml_reg",
            Algorithm::Finetune => "finetune",
        }
    }

    pub fn is_baseline(self) -> bool {
        self == Algorithm::Finetune
    }
}

/// The task distribution and episode shape. Input dimension comes from the
/// model section and the pool seed from `seeds.master`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub n_train_classes: usize,
    pub n_test_classes: usize,
    pub prototype_scale: f64,
    pub noise_scale: f64,
    pub rotate_per_task: bool,
    pub k_shot: usize,
    pub q_target: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let d = TaskDistributionConfig::default();
        Self {
            n_train_classes: d.n_train_classes,
            n_test_classes: d.n_test_classes,
            prototype_scale: d.prototype_scale,
            noise_scale: d.noise_scale,
            rotate_per_task: d.rotate_per_task,
            k_shot: 1,
            q_target: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Tasks used for the Hessian spectral norm.
    pub flatness_tasks: usize,
    /// Tasks used for accuracy, support loss, coherence and trajectory norms.
    pub coherence_tasks: usize,
    /// Reuse the same evaluation tasks every epoch.
    pub fixed_eval: bool,
    /// Count `i == j` pairs in the coherence means.
    pub include_self_pairs: bool,
    pub power_iteration: PowerIterationConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            flatness_tasks: 60,
            coherence_tasks: 500,
            fixed_eval: true,
            include_self_pairs: false,
            power_iteration: PowerIterationConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Class prototypes, initialization and meta-train task sampling.
    pub master: u64,
    /// Evaluation task sets and baseline head draws.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { master: 0, eval: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    #[serde(default = "ModelSpec::desk")]
    pub model: ModelSpec,
    #[serde(default)]
    pub tasks: TaskSection,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Meta-steps per epoch. The baseline uses `hyper.finetune` instead.
    #[serde(default = "default_iterations")]
    pub iterations_per_epoch: usize,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_epochs() -> usize {
    25
}

fn default_iterations() -> usize {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Desk-scale defaults for `algorithm`.
    pub fn new(algorithm: Algorithm) -> Self {
        let mut hyper = HyperParams::default();
        if algorithm == Algorithm::MamlReg {
            hyper.gamma = 0.5;
        }
        Self {
            algorithm,
            model: ModelSpec::desk(),
            tasks: TaskSection::default(),
            hyper,
            epochs: default_epochs(),
            iterations_per_epoch: default_iterations(),
            eval: EvalSection::default(),
            seeds: Seeds::default(),
            output_dir: default_output_dir(),
        }
    }

    /// 500 meta-steps per epoch.
    pub fn paper_scale(algorithm: Algorithm) -> Self {
        Self { iterations_per_epoch: 500, ..Self::new(algorithm) }
    }

    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            RunnerError::Config(m) => RunnerError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `METALAND_SEED` if set.
    pub fn apply_env(&mut self) -> Result<(), RunnerError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds.master =
                v.trim().parse().map_err(|_| RunnerError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Config(m));
        self.model.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
        self.hyper.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
        crate::tasks::build_pool(&self.distribution()).map_err(|e| RunnerError::Config(e.to_string()))?;
        let t = &self.tasks;
        if t.k_shot == 0 || t.q_target == 0 {
            return bad(format!("k_shot and q_target must be positive (got {}, {})", t.k_shot, t.q_target));
        }
        if self.model.n_way > t.n_test_classes || self.model.n_way > t.n_train_classes {
            return bad(format!(
                "{}-way tasks need at least that many train and test classes ({} / {})",
                self.model.n_way, t.n_train_classes, t.n_test_classes
            ));
        }
        if self.eval.coherence_tasks < 2 || self.eval.flatness_tasks == 0 {
            return bad("need coherence_tasks >= 2 and flatness_tasks >= 1".into());
        }
        if !(self.eval.power_iteration.tol > 0.0) || self.eval.power_iteration.max_iters == 0 {
            return bad("power iteration needs tol > 0 and max_iters > 0".into());
        }
        match self.algorithm {
            Algorithm::Maml | Algorithm::Fomaml if self.hyper.gamma != 0.0 => {
                bad(format!("gamma = {} is only used by maml_reg", self.hyper.gamma))
            }
            Algorithm::MamlReg if self.hyper.gamma == 0.0 => bad("maml_reg needs gamma > 0".into()),
            Algorithm::MamlReg if self.hyper.meta_batch < 2 => bad("maml_reg needs meta_batch >= 2".into()),
            Algorithm::Finetune if self.hyper.finetune.batch_size == 0 => {
                bad("finetune batch_size must be positive".into())
            }
            _ => Ok(()),
        }
    }

    pub fn distribution(&self) -> TaskDistributionConfig {
        TaskDistributionConfig {
            input_dim: self.model.input_dim,
            n_train_classes: self.tasks.n_train_classes,
            n_test_classes: self.tasks.n_test_classes,
            prototype_scale: self.tasks.prototype_scale,
            noise_scale: self.tasks.noise_scale,
            rotate_per_task: self.tasks.rotate_per_task,
            master_seed: self.seeds.master,
        }
    }

    /// Hyperparameters with the derivative order fixed by the algorithm.
    pub fn effective_hyper(&self) -> HyperParams {
        let mut hp = self.hyper.clone();
        match self.algorithm {
            Algorithm::Maml => hp.order = Order::Second,
            Algorithm::Fomaml => hp.order = Order::First,
            Algorithm::MamlReg | Algorithm::Finetune => {}
        }
        hp
    }

    /// The spec that is trained: the baseline has one output per train class.
    pub fn train_spec(&self) -> ModelSpec {
        if self.algorithm.is_baseline() {
            self.model.with_way(self.tasks.n_train_classes)
        } else {
            self.model.clone()
        }
    }
}
