use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Session, Shape};
use crate::model::{build_loss, ModelSpec, ParameterVector};
use crate::tasks::{sample_supervised_batch, ClassPool, SeedPath};

use super::{adam_step, AdamConfig, AdamState, MetaError};

/// Supervised pre-training schedule for the finetune baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub iters_per_epoch: usize,
}

impl Default for FinetuneConfig {
    /// The 1-shot schedule: 25 mini-batches of 64 per epoch.
    fn default() -> Self {
        Self { batch_size: 64, iters_per_epoch: 25 }
    }
}

impl FinetuneConfig {
    /// 12 mini-batches of 128 per epoch, used for 5-shot.
    pub fn five_shot() -> Self {
        Self { batch_size: 128, iters_per_epoch: 12 }
    }
}

/// One epoch of plain cross-entropy training over all meta-train classes.
/// `spec.n_way` must equal the number of train classes. Returns the mean
/// mini-batch loss (NaN when `iters == 0`).
#[allow(clippy::too_many_arguments)]
pub fn finetune_train_epoch(
    spec: &ModelSpec,
    params: &mut ParameterVector,
    adam: &mut AdamState,
    pool: &ClassPool,
    cfg: &FinetuneConfig,
    lr: f64,
    adam_cfg: &AdamConfig,
    epoch: u64,
) -> Result<f64, MetaError> {
    params.check_len(spec)?;
    let n_train = pool.config().n_train_classes;
    if spec.n_way != n_train {
        return Err(MetaError::InvalidHyper(format!(
            "baseline head has {} outputs but there are {n_train} train classes",
            spec.n_way
        )));
    }
    if cfg.iters_per_epoch == 0 {
        return Ok(f64::NAN);
    }
    let mut graph = Graph::new();
    let p = graph.input("params", Shape::column(spec.param_count()))?;
    let x = graph.input("x", Shape::new(cfg.batch_size, spec.input_dim))?;
    let y = graph.input("y", Shape::new(cfg.batch_size, spec.n_way))?;
    let loss = build_loss(&mut graph, spec, p, x, y)?;
    let grad = graph.gradient(loss, &[p], false)?.result[0];

    let mut total = 0.0;
    for it in 0..cfg.iters_per_epoch {
        let batch = sample_supervised_batch(pool, cfg.batch_size, SeedPath::new(epoch, it as u64));
        let mut s = Session::with_inputs(
            &graph,
            [("params", params.to_tensor()), ("x", batch.features.clone()), ("y", batch.one_hot(spec.n_way)?)],
        )?;
        let out = s.eval_many(&[loss, grad])?;
        let l = out[0].item();
        if !l.is_finite() {
            return Err(MetaError::NonFinite(format!("baseline loss at epoch {epoch}, iteration {it}")));
        }
        total += l;
        adam_step(adam, params, out[1].data(), lr, adam_cfg)?;
    }
    Ok(total / cfg.iters_per_epoch as f64)
}
