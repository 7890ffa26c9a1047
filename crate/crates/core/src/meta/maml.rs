use crate::autodiff::{Session, Tensor};
use crate::model::{ModelSpec, ParameterVector};
use crate::par;
use crate::tasks::Episode;

use super::adapt::unit_direction;
use super::program::OFFSET;
use super::{adam_step, AdamState, HyperParams, MetaError, MetaProgram, Order};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    /// Mean over tasks of the target-loss gradient w.r.t. the start point.
    pub gradient: ParameterVector,
    pub mean_target_loss: f64,
    /// Per-task adapted solutions (before any correction).
    pub solutions: Vec<ParameterVector>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegularizerDiagnostics {
    /// Tasks whose displacement was zero, so no correction was applied.
    pub skipped: usize,
    /// Mean of `dir_i . dir_mean` over tasks with a direction.
    pub alignment_before: f64,
    /// Same, after the correction (directions recomputed, mean held fixed).
    pub alignment_after: f64,
    pub mean_target_loss: f64,
}

fn zero_offset(dim: usize) -> Tensor {
    Tensor::column(vec![0.0; dim])
}

fn first_phase<'p>(
    program: &'p MetaProgram,
    theta: &ParameterVector,
    batch: &[Episode],
) -> Result<Vec<(Session<'p>, ParameterVector)>, MetaError> {
    let solution = program.inner.solution();
    par::map_collect(batch, |episode| {
        let mut session = program.session(theta, episode)?;
        let sol = session.eval(solution)?.data().to_vec();
        Ok((session, ParameterVector::new(sol)))
    })
    .into_iter()
    .collect()
}

fn second_phase(
    program: &MetaProgram,
    sessions: Vec<Session<'_>>,
    offsets: Vec<Tensor>,
) -> Result<(ParameterVector, f64), MetaError> {
    let n = sessions.len();
    let per_task: Vec<Result<(Tensor, f64), MetaError>> =
        par::map_owned(sessions.into_iter().zip(offsets).collect(), |(mut s, off)| {
            s.feed(OFFSET, off)?;
            let out = s.eval_many(&[program.meta_gradient, program.target_loss])?;
            let mut out = out.into_iter();
            let g = out.next().expect("gradient");
            Ok((g, out.next().expect("loss").item()))
        });
    let dim = program.spec.param_count();
    let mut sum = vec![0.0; dim];
    let mut loss = 0.0;
    for r in per_task {
        let (g, l) = r?;
        for (acc, v) in sum.iter_mut().zip(g.data()) {
            *acc += v;
        }
        loss += l;
    }
    let inv = n as f64;
    let grad: Vec<f64> = sum.into_iter().map(|v| v / inv).collect();
    if !grad.iter().all(|v| v.is_finite()) || !loss.is_finite() {
        return Err(MetaError::NonFinite("meta-gradient".into()));
    }
    Ok((grad.into(), loss / inv))
}

/// Meta-gradient with a constant per-task correction added to each adapted
/// solution before the target loss. `None` means no correction.
pub fn meta_gradient_with_offsets(
    program: &MetaProgram,
    theta: &ParameterVector,
    batch: &[Episode],
    offsets: Option<&[ParameterVector]>,
) -> Result<MetaGradient, MetaError> {
    if batch.is_empty() {
        return Err(MetaError::NoEpisodes);
    }
    let dim = program.spec.param_count();
    let offsets: Vec<Tensor> = match offsets {
        Some(o) => {
            if o.len() != batch.len() {
                return Err(MetaError::BatchSize { expected: batch.len(), found: o.len() });
            }
            o.iter().map(|p| p.to_tensor()).collect()
        }
        None => (0..batch.len()).map(|_| zero_offset(dim)).collect(),
    };
    let phase = first_phase(program, theta, batch)?;
    let (sessions, solutions): (Vec<_>, Vec<_>) = phase.into_iter().unzip();
    let (gradient, mean_target_loss) = second_phase(program, sessions, offsets)?;
    Ok(MetaGradient { gradient, mean_target_loss, solutions })
}

fn program_for(spec: &ModelSpec, batch: &[Episode], hp: &HyperParams) -> Result<MetaProgram, MetaError> {
    let first = batch.first().ok_or(MetaError::NoEpisodes)?;
    MetaProgram::for_episode(spec, first, hp.alpha, hp.inner_steps, hp.order == Order::Second)
}

/// `(1/n) sum_i grad_theta L(target_i; adapted_i(theta))`.
///
/// Second order differentiates through the inner loop; first order treats
/// the adapted solution as if it moved one-for-one with `theta`.
pub fn maml_meta_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &[Episode],
    hp: &HyperParams,
) -> Result<MetaGradient, MetaError> {
    hp.validate()?;
    if batch.len() != hp.meta_batch {
        return Err(MetaError::BatchSize { expected: hp.meta_batch, found: batch.len() });
    }
    let program = program_for(spec, batch, hp)?;
    meta_gradient_with_offsets(&program, theta, batch, None)
}

/// Per-task constant corrections `-gamma * grad Omega_i` with
/// `Omega_i = -dir_i . dir_mean`, the gradient taken w.r.t. the adapted
/// solution while the start point and the mean direction stay fixed:
/// `grad Omega_i = (-dir_mean + (dir_i . dir_mean) dir_i) / |displacement_i|`.
fn coherence_corrections(
    theta: &ParameterVector,
    solutions: &[ParameterVector],
    gamma: f64,
    leave_one_out: bool,
) -> (Vec<ParameterVector>, RegularizerDiagnostics) {
    let dim = theta.len();
    let displacements: Vec<Vec<f64>> = solutions
        .iter()
        .map(|s| s.iter().zip(theta.iter()).map(|(a, b)| a - b).collect())
        .collect();
    let directions: Vec<Option<ParameterVector>> = displacements.iter().map(|d| unit_direction(d)).collect();
    let defined = directions.iter().flatten().count();
    let mut sum = vec![0.0; dim];
    for d in directions.iter().flatten() {
        for (acc, v) in sum.iter_mut().zip(d.iter()) {
            *acc += v;
        }
    }

    let mut diag = RegularizerDiagnostics { skipped: directions.len() - defined, ..Default::default() };
    let mut offsets = Vec::with_capacity(solutions.len());
    let mut before = 0.0;
    let mut after = 0.0;
    let mut counted = 0usize;
    for (disp, dir) in displacements.iter().zip(&directions) {
        let Some(dir) = dir else {
            offsets.push(ParameterVector::zeros(dim));
            continue;
        };
        let mean: Vec<f64> = if leave_one_out {
            if defined < 2 {
                offsets.push(ParameterVector::zeros(dim));
                diag.skipped += 1;
                continue;
            }
            let k = (defined - 1) as f64;
            sum.iter().zip(dir.iter()).map(|(s, d)| (s - d) / k).collect()
        } else {
            let k = defined as f64;
            sum.iter().map(|s| s / k).collect()
        };
        let norm = disp.iter().map(|x| x * x).sum::<f64>().sqrt();
        let align: f64 = dir.iter().zip(&mean).map(|(a, b)| a * b).sum();
        // theta_hat = theta_tilde - gamma * grad Omega
        let offset: Vec<f64> = mean
            .iter()
            .zip(dir.iter())
            .map(|(m, d)| -gamma * ((-m + align * d) / norm))
            .collect();
        let corrected: Vec<f64> = disp.iter().zip(&offset).map(|(a, b)| a + b).collect();
        if let Some(cd) = unit_direction(&corrected) {
            after += cd.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
        }
        before += align;
        counted += 1;
        offsets.push(offset.into());
    }
    if counted > 0 {
        diag.alignment_before = before / counted as f64;
        diag.alignment_after = after / counted as f64;
    }
    (offsets, diag)
}

/// One meta-training iteration: adapt every task, apply the trajectory
/// coherence correction (skipped when `gamma == 0`), take the meta-gradient
/// at the corrected solutions with the correction held constant, then update
/// with ADAM.
pub fn regularized_meta_step(
    spec: &ModelSpec,
    theta: &ParameterVector,
    adam: &mut AdamState,
    batch: &[Episode],
    hp: &HyperParams,
) -> Result<(ParameterVector, RegularizerDiagnostics), MetaError> {
    let program = program_for(spec, batch, hp)?;
    meta_step(&program, theta, adam, batch, hp)
}

/// [`regularized_meta_step`] with a prebuilt program.
pub fn meta_step(
    program: &MetaProgram,
    theta: &ParameterVector,
    adam: &mut AdamState,
    batch: &[Episode],
    hp: &HyperParams,
) -> Result<(ParameterVector, RegularizerDiagnostics), MetaError> {
    hp.validate()?;
    if batch.len() != hp.meta_batch {
        return Err(MetaError::BatchSize { expected: hp.meta_batch, found: batch.len() });
    }
    if hp.gamma > 0.0 && batch.len() < 2 {
        return Err(MetaError::InvalidHyper("the coherence regularizer needs at least 2 tasks per batch".into()));
    }
    let dim = program.spec.param_count();
    let phase = first_phase(program, theta, batch)?;
    let (sessions, solutions): (Vec<_>, Vec<_>) = phase.into_iter().unzip();
    let (offsets, mut diag) = if hp.gamma > 0.0 {
        let (o, d) = coherence_corrections(theta, &solutions, hp.gamma, hp.leave_one_out);
        (o.iter().map(|p| p.to_tensor()).collect(), d)
    } else {
        ((0..batch.len()).map(|_| zero_offset(dim)).collect(), RegularizerDiagnostics::default())
    };
    let (grad, loss) = second_phase(program, sessions, offsets)?;
    diag.mean_target_loss = loss;
    let mut next = theta.clone();
    adam_step(adam, &mut next, &grad, hp.beta, &hp.adam)?;
    Ok((next, diag))
}
