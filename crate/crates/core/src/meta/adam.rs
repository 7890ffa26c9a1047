use serde::{Deserialize, Serialize};

use super::MetaError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { b1: 0.9, b2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), MetaError> {
    if state.m.len() != params.len() || grad.len() != params.len() {
        return Err(MetaError::Dimension { expected: params.len(), found: grad.len().min(state.m.len()) });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.b1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.b1 * state.m[i] + (1.0 - cfg.b1) * g;
        state.v[i] = cfg.b2 * state.v[i] + (1.0 - cfg.b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
