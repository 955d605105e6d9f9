//! Bias-corrected Adam updates over flat parameter vectors.
//!
//! One [`AdamState`] accompanies each trained network. The update for every
//! coordinate is the textbook rule
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g        v ← β₂ v + (1 − β₂) g²
//! m̂ = m / (1 − β₁ᵗ)            v̂ = v / (1 − β₂ᵗ)
//! θ ← θ − lr · m̂ / (√v̂ + ε)
//! ```
//!
//! with the standard constants β₁ = 0.9, β₂ = 0.999, ε = 1e-8.

use super::NetworkParameters;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second-moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }
}

/// One Adam step in place. Rejects shape mismatches and non-finite gradient
/// entries (reporting the first offending index) before touching any state.
pub fn adam_step(
    params: &mut NetworkParameters,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grad.len() != params.flat.len() || state.m.len() != params.flat.len() {
        return Err(Error::InvalidInput(format!(
            "adam shape mismatch: params {}, grad {}, state {}",
            params.flat.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::InvalidInput(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient entry {} at index {i}",
            grad[i]
        )));
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.flat[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}
