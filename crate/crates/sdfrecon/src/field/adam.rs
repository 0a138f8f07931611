//! Adaptive-moment parameter updates with linear warmup and cosine decay.

use super::{flatten_grads, FieldError, FieldGrads, ImplicitField};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent ramping the rate up linearly.
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            total_steps: 5000,
        }
    }
}

impl OptimConfig {
    /// Warmup then cosine decay to 5% of the base rate.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = (self.warmup_frac * self.total_steps as f64).max(1.0);
        let s = step as f64;
        if s < warmup {
            self.lr * (s + 1.0) / warmup
        } else {
            let t = ((s - warmup) / (self.total_steps as f64 - warmup).max(1.0)).clamp(0.0, 1.0);
            let floor = 0.05;
            self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: OptimConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: OptimConfig) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0, config }
    }
}

/// One optimizer step. Rejects non-finite gradients with a diagnostic
/// naming the loss term that produced them. `log_s` is a parameter like any
/// other, so `s = exp(log_s)` stays positive by construction.
pub fn apply_gradients(
    field: &mut ImplicitField,
    grads: &FieldGrads,
    state: &mut AdamState,
) -> Result<(), FieldError> {
    let flat_g = flatten_grads(field, grads);
    if flat_g.len() != state.m.len() {
        return Err(FieldError::ShapeMismatch(format!(
            "gradient length {} vs optimizer state {}",
            flat_g.len(),
            state.m.len()
        )));
    }
    if let Some(idx) = flat_g.iter().position(|v| !v.is_finite()) {
        return Err(FieldError::NonFiniteGradient {
            source_term: grads.source_term.clone(),
            detail: format!("gradient component {idx} of {} is non-finite", flat_g.len()),
        });
    }
    let mut params = field.flatten_params();
    let c = &state.config;
    let lr = c.lr_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..params.len() {
        let g = flat_g[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + c.eps);
    }
    state.step += 1;
    field.set_params(&params);
    field.assert_finite()
}
