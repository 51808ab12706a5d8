use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub hyper: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, hyper: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step: 0, hyper }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut OptimizerState) -> Result<()> {
    for (t, g) in params.tensors().iter().zip(&grads.tensors) {
        if g.len() != t.len() {
            return Err(Error::ConfigInvalid(format!("gradient shape mismatch for {}", t.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((tensor, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Scale all gradients by `max_norm / g` when the global L2 norm `g` exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
