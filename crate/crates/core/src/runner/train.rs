use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::landscape::{
    avg_spectral_norm, mean_pairwise_inner_product, support_loss_stats, trajectory_coherence,
    trajectory_norm_stats, MetricError,
};
use crate::meta::{
    finetune_train_epoch, meta_step, meta_test_evaluate, AdamState, AdaptationTrace, EvalOptions,
    HeadReplacement, MetaError, MetaProgram, Order, TaskOutcome,
};
use crate::model::{init_params, ParameterVector};
use crate::par;
use crate::tasks::{build_pool, derive_seed, fixed_eval_set, sample_task, ClassPool, Episode, SeedPath, Split};

use super::checkpoint::{self, Checkpoint, Sidecar};
use super::manifest::{RunManifest, RunStatus};
use super::metrics::{MetricRecord, MetricsWriter};
use super::{ExperimentConfig, RunnerError};

const INIT_TAG: u64 = 0x696e_6974;
const FLATNESS_TAG: u64 = 0x666c_6174;
const COHERENCE_TAG: u64 = 0x636f_6865;
const HEAD_TAG: u64 = 0x6865_6164;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Worker thread cap; `None` uses every core.
    pub jobs: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

/// Per-epoch values that are useful for diagnosis but are not metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    /// Mean meta-batch target loss (or supervised loss for the baseline)
    /// over the epoch's iterations; null at epoch 0.
    pub train_loss: Option<f64>,
    pub spectral_not_converged: usize,
    /// Flatness tasks whose dominant Hessian eigenvalue is negative.
    pub spectral_negative_dominant: usize,
    pub trajectory_norm_std: f64,
    pub regularizer_skipped: usize,
    pub alignment_before: Option<f64>,
    pub alignment_after: Option<f64>,
}

pub struct EvalSets {
    pub flatness: Vec<Episode>,
    pub coherence: Vec<Episode>,
}

/// Meta-test task sets for `epoch`; the same for every epoch when
/// `eval.fixed_eval` is set.
pub fn eval_sets(cfg: &ExperimentConfig, pool: &ClassPool, epoch: usize) -> Result<EvalSets, RunnerError> {
    let tag = |kind: u64| {
        if cfg.eval.fixed_eval {
            derive_seed(&[cfg.seeds.eval, kind])
        } else {
            derive_seed(&[cfg.seeds.eval, kind, epoch as u64])
        }
    };
    let (n, k, q) = (cfg.model.n_way, cfg.tasks.k_shot, cfg.tasks.q_target);
    Ok(EvalSets {
        flatness: fixed_eval_set(pool, n, k, q, cfg.eval.flatness_tasks, tag(FLATNESS_TAG))?,
        coherence: fixed_eval_set(pool, n, k, q, cfg.eval.coherence_tasks, tag(COHERENCE_TAG))?,
    })
}

fn head(cfg: &ExperimentConfig) -> HeadReplacement {
    if cfg.algorithm.is_baseline() {
        HeadReplacement::Replace { seed: derive_seed(&[cfg.seeds.eval, HEAD_TAG]) }
    } else {
        HeadReplacement::Keep
    }
}

fn finite(name: &str, v: f64, epoch: usize) -> Result<f64, RunnerError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(RunnerError::Numeric(format!("{name} is {v} at epoch {epoch}")))
    }
}

/// The per-epoch evaluation of `params`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    pool: &ClassPool,
    params: &ParameterVector,
    epoch: usize,
) -> Result<(MetricRecord, EpochDiagnostics), RunnerError> {
    let spec = cfg.train_spec();
    let hp = cfg.effective_hyper();
    let sets = eval_sets(cfg, pool, epoch)?;
    let head = head(cfg);
    let opts = EvalOptions { keep_iterates: false, keep_logits: false, keep_start_gradient: true };
    let coh = meta_test_evaluate(&spec, params, &sets.coherence, hp.alpha, hp.inner_steps, head, opts)?;
    let flat_opts = EvalOptions { keep_start_gradient: false, ..opts };
    let flat = meta_test_evaluate(&spec, params, &sets.flatness, hp.alpha, hp.inner_steps, head, flat_opts)?;

    let flat_traces: Vec<&AdaptationTrace> = flat.tasks.iter().map(|t| &t.trace).collect();
    let spectral = avg_spectral_norm(&flat.spec, &flat_traces, &sets.flatness, &cfg.eval.power_iteration)?;

    let traces: Vec<&AdaptationTrace> = coh.tasks.iter().map(|t| &t.trace).collect();
    let n = traces.len();
    let include_self = cfg.eval.include_self_pairs;
    let (tc, used, undefined) = match trajectory_coherence(&traces, include_self) {
        Ok(c) => (Some(c.value), c.used, c.undefined),
        Err(MetricError::TooFew { found, .. }) => (None, found, n - found),
        Err(e) => return Err(e.into()),
    };
    let grads: Vec<Vec<f64>> = coh
        .tasks
        .iter()
        .map(|t: &TaskOutcome| {
            t.start_gradient.as_ref().expect("kept start gradients").iter().map(|g| -g).collect()
        })
        .collect();
    let gc = mean_pairwise_inner_product(&grads, include_self)?;
    let (tn_mean, tn_std) = trajectory_norm_stats(&traces)?;
    let support = support_loss_stats(&traces)?;

    let record = MetricRecord {
        epoch,
        avg_target_accuracy: finite("accuracy", coh.avg_target_accuracy, epoch)?,
        avg_support_loss: finite("support loss", support, epoch)?,
        avg_spectral_norm: finite("spectral norm", spectral.mean, epoch)?,
        trajectory_coherence: tc.map(|v| finite("trajectory coherence", v, epoch)).transpose()?,
        gradient_coherence: finite("gradient coherence", gc, epoch)?,
        avg_trajectory_norm: finite("trajectory norm", tn_mean, epoch)?,
        n_tasks_per_metric: vec![n, n, spectral.estimates.len(), used, n, n],
        undefined_direction_count: undefined,
    };
    let diag = EpochDiagnostics {
        epoch,
        spectral_not_converged: spectral.not_converged(),
        spectral_negative_dominant: spectral.negative_dominant(),
        trajectory_norm_std: tn_std,
        ..Default::default()
    };
    Ok((record, diag))
}

struct EpochSummary {
    loss: f64,
    skipped: usize,
    alignment: Option<(f64, f64)>,
}

fn train_meta_epoch(
    cfg: &ExperimentConfig,
    pool: &ClassPool,
    program: &MetaProgram,
    params: &mut ParameterVector,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<EpochSummary, RunnerError> {
    let hp = cfg.effective_hyper();
    let (n, k, q) = (cfg.model.n_way, cfg.tasks.k_shot, cfg.tasks.q_target);
    let mut loss = 0.0;
    let mut skipped = 0;
    let (mut before, mut after) = (0.0, 0.0);
    for it in 0..cfg.iterations_per_epoch {
        let paths: Vec<SeedPath> = (0..hp.meta_batch)
            .map(|b| SeedPath::new(epoch as u64, (it * hp.meta_batch + b) as u64))
            .collect();
        let batch: Vec<Episode> = par::map_collect(&paths, |&p| sample_task(pool, Split::Train, n, k, q, p))
            .into_iter()
            .collect::<Result<_, _>>()?;
        let (next, diag) = meta_step(program, params, adam, &batch, &hp).map_err(|e| match e {
            MetaError::NonFinite(what) => {
                RunnerError::Numeric(format!("{what} at epoch {epoch}, iteration {it}"))
            }
            other => other.into(),
        })?;
        *params = next;
        loss += diag.mean_target_loss;
        skipped += diag.skipped;
        before += diag.alignment_before;
        after += diag.alignment_after;
    }
    let iters = cfg.iterations_per_epoch.max(1) as f64;
    Ok(EpochSummary {
        loss: loss / iters,
        skipped,
        alignment: (hp.gamma > 0.0).then_some((before / iters, after / iters)),
    })
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}.bin")
}

fn append_line(file: &mut File, path: &Path, line: &str) -> Result<(), RunnerError> {
    writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| RunnerError::io(path, e))
}

fn truncate_lines(path: &Path, keep: usize) -> Result<(), RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    let kept: String = text.split_inclusive('\n').take(keep).collect();
    std::fs::write(path, kept).map_err(|e| RunnerError::io(path, e))
}

struct RunState {
    params: ParameterVector,
    adam: AdamState,
    epoch: usize,
}

/// Trains `cfg.epochs` epochs into `out`, evaluating and checkpointing after
/// each one (and once before training). With `resume`, continues from the
/// last checkpoint of a previous run whose config differs at most in
/// `epochs`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, opts: &TrainOptions) -> Result<RunManifest, RunnerError> {
    let mut cfg = cfg.clone();
    cfg.output_dir = out.to_path_buf();
    cfg.validate()?;
    par::with_jobs(opts.jobs, || run_train_inner(&cfg, out, opts))
}

fn run_train_inner(cfg: &ExperimentConfig, out: &Path, opts: &TrainOptions) -> Result<RunManifest, RunnerError> {
    let start = Instant::now();
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| RunnerError::io(out, e))?;
    let pool = build_pool(&cfg.distribution())?;
    let spec = cfg.train_spec();
    let jsonl = out.join("metrics.jsonl");
    let csv = out.join("metrics.csv");
    let diag_path = out.join("diagnostics.jsonl");

    let resumable = opts.resume && out.join(super::manifest::MANIFEST_FILE).exists();
    let (mut manifest, mut state, mut writer) = if resumable {
        let mut manifest = RunManifest::load(out)?;
        // only the epoch count may change, so a finished run can be extended
        let previous = ExperimentConfig { epochs: cfg.epochs, ..manifest.config.clone() };
        if previous != *cfg {
            return Err(RunnerError::Config(format!(
                "{} was produced by a different config; refusing to resume",
                out.display()
            )));
        }
        manifest.config = cfg.clone();
        let last = manifest
            .checkpoints
            .last()
            .ok_or_else(|| RunnerError::Checkpoint("no checkpoint to resume from".into()))?
            .clone();
        let ckpt = checkpoint::load(&out.join(&last))?;
        let epoch = ckpt.sidecar.epoch;
        if ckpt.sidecar.spec != spec {
            return Err(RunnerError::Checkpoint(format!(
                "checkpoint spec has {} parameters, config expects {}",
                ckpt.sidecar.spec.param_count(),
                spec.param_count()
            )));
        }
        let adam = ckpt.adam.ok_or_else(|| RunnerError::Checkpoint(format!("{last} has no optimizer state")))?;
        let writer = MetricsWriter::resume(&jsonl, &csv, epoch)?;
        truncate_lines(&diag_path, epoch + 1)?;
        manifest.checkpoints.truncate(epoch + 1);
        manifest.timings.epoch_seconds.truncate(epoch + 1);
        manifest.status = RunStatus::Running;
        manifest.error = None;
        (manifest, RunState { params: ckpt.params, adam, epoch }, writer)
    } else {
        let manifest = RunManifest::new(cfg.clone());
        manifest.save(out)?;
        let writer = MetricsWriter::create(&jsonl, &csv)?;
        File::create(&diag_path).map_err(|e| RunnerError::io(&diag_path, e))?;
        let params = init_params(&spec, derive_seed(&[cfg.seeds.master, INIT_TAG]));
        let adam = AdamState::new(spec.param_count());
        (manifest, RunState { params, adam, epoch: 0 }, writer)
    };
    manifest.save(out)?;
    let mut diag_file =
        File::options().append(true).open(&diag_path).map_err(|e| RunnerError::io(&diag_path, e))?;

    let result = (|| -> Result<(), RunnerError> {
        let save_epoch = |state: &RunState, manifest: &mut RunManifest| -> Result<(), RunnerError> {
            let name = checkpoint_name(state.epoch);
            checkpoint::save(
                &out.join(&name),
                &Checkpoint {
                    params: state.params.clone(),
                    sidecar: Sidecar {
                        spec: spec.clone(),
                        seed: cfg.seeds.master,
                        epoch: state.epoch,
                        algorithm: cfg.algorithm.name().into(),
                        adam_steps: state.adam.t,
                    },
                    adam: Some(state.adam.clone()),
                },
            )?;
            manifest.checkpoints.push(name);
            Ok(())
        };

        if !resumable {
            let t0 = Instant::now();
            let (record, diag) = evaluate(cfg, &pool, &state.params, 0)?;
            writer.append(&record)?;
            append_line(&mut diag_file, &diag_path, &serde_json::to_string(&diag).expect("serializes"))?;
            save_epoch(&state, &mut manifest)?;
            manifest.timings.epoch_seconds.push(t0.elapsed().as_secs_f64());
            manifest.save(out)?;
            progress(opts, &record);
        }

        let hp = cfg.effective_hyper();
        let program = if cfg.algorithm.is_baseline() {
            None
        } else {
            Some(MetaProgram::build(
                &spec,
                cfg.model.n_way * cfg.tasks.k_shot,
                cfg.model.n_way * cfg.tasks.q_target,
                hp.alpha,
                hp.inner_steps,
                hp.order == Order::Second,
            )?)
        };
        while state.epoch < cfg.epochs {
            let t0 = Instant::now();
            let epoch = state.epoch + 1;
            let summary = match &program {
                Some(program) => train_meta_epoch(cfg, &pool, program, &mut state.params, &mut state.adam, epoch)?,
                None => {
                    let loss = finetune_train_epoch(
                        &spec,
                        &mut state.params,
                        &mut state.adam,
                        &pool,
                        &hp.finetune,
                        hp.beta,
                        &hp.adam,
                        epoch as u64,
                    )
                    .map_err(|e| match e {
                        MetaError::NonFinite(what) => RunnerError::Numeric(what),
                        other => other.into(),
                    })?;
                    EpochSummary { loss, skipped: 0, alignment: None }
                }
            };
            state.epoch = epoch;
            let (record, mut diag) = evaluate(cfg, &pool, &state.params, epoch)?;
            diag.train_loss = summary.loss.is_finite().then_some(summary.loss);
            diag.regularizer_skipped = summary.skipped;
            diag.alignment_before = summary.alignment.map(|a| a.0);
            diag.alignment_after = summary.alignment.map(|a| a.1);
            writer.append(&record)?;
            append_line(&mut diag_file, &diag_path, &serde_json::to_string(&diag).expect("serializes"))?;
            save_epoch(&state, &mut manifest)?;
            manifest.timings.epoch_seconds.push(t0.elapsed().as_secs_f64());
            manifest.save(out)?;
            progress(opts, &record);
        }
        Ok(())
    })();

    manifest.timings.total_seconds += start.elapsed().as_secs_f64();
    match &result {
        Ok(()) => manifest.status = RunStatus::Complete,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    manifest.save(out)?;
    result.map(|_| manifest)
}

fn progress(opts: &TrainOptions, r: &MetricRecord) {
    if opts.verbose {
        eprintln!(
            "epoch {:>3}  acc {:.4}  support {:.4}  |H| {:.4}  traj {}  grad {:.3e}  norm {:.4}",
            r.epoch,
            r.avg_target_accuracy,
            r.avg_support_loss,
            r.avg_spectral_norm,
            r.trajectory_coherence.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.gradient_coherence,
            r.avg_trajectory_norm,
        );
    }
}

/// Re-evaluates a saved checkpoint. Without `cfg`, the config is taken from
/// the manifest of the run that wrote the checkpoint.
pub fn run_eval(
    checkpoint_path: &Path,
    cfg: Option<&ExperimentConfig>,
    jobs: Option<usize>,
) -> Result<MetricRecord, RunnerError> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let run_dir: PathBuf = checkpoint_path
                .parent()
                .and_then(|p| p.parent())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            RunManifest::load(&run_dir)
                .map_err(|e| RunnerError::Config(format!("no --config given and no run manifest found: {e}")))?
                .config
        }
    };
    cfg.validate()?;
    let spec = cfg.train_spec();
    if ckpt.sidecar.spec != spec {
        return Err(RunnerError::Checkpoint(format!(
            "config expects {} parameters ({:?}), checkpoint has {} ({:?})",
            spec.param_count(),
            spec,
            ckpt.params.len(),
            ckpt.sidecar.spec
        )));
    }
    let pool = build_pool(&cfg.distribution())?;
    par::with_jobs(jobs, || evaluate(&cfg, &pool, &ckpt.params, ckpt.sidecar.epoch).map(|r| r.0))
}
