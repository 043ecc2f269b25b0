use serde::{Deserialize, Serialize};

use super::TensorError;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step_count: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub hyper: AdamW,
}

impl AdamWState {
    pub fn new(len: usize, hyper: AdamW) -> Self {
        Self {
            step_count: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            hyper,
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` in place.
///
/// The gradient is validated before anything is mutated, so a rejected step
/// leaves both the parameter and the state untouched.
pub fn adamw_step(
    name: &str,
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamWState,
    lr: f32,
) -> Result<(), TensorError> {
    if !(lr > 0.0) {
        return Err(TensorError::InvalidLearningRate(lr));
    }
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            left: vec![param.len()],
            right: vec![grad.len()],
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFiniteGradient(name.to_string()));
    }
    let AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
