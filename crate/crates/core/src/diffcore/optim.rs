use super::params::{GradStore, ParameterSet};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// RMSProp state: per-parameter squared-gradient running averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub sq_avg: Vec<Vec<f64>>,
    /// decay factor for the running average
    pub alpha: f64,
    pub eps: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, lr: f64, eps: f64) -> Self {
        Self {
            sq_avg: params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.value.len()])
                .collect(),
            alpha: 0.99,
            eps,
            lr,
        }
    }
}

/// Scales all gradients by max_norm/norm when the global norm exceeds
/// max_norm. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0);
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Global norm clipping followed by the RMSProp update
/// avg ← α·avg + (1−α)·g²; p ← p − lr·g/√(avg + ε).
pub fn clip_and_step(
    params: &mut ParameterSet,
    grads: &GradStore,
    state: &mut OptimizerState,
    max_norm: f64,
) -> Result<()> {
    for (t, g) in params.tensors.iter().zip(&grads.grads) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFiniteGradient(t.name.clone()));
        }
    }
    let mut clipped = grads.clone();
    clip_gradients(&mut clipped, max_norm);
    for (i, t) in params.tensors.iter_mut().enumerate() {
        let avg = &mut state.sq_avg[i];
        for (j, p) in t.value.data.iter_mut().enumerate() {
            let g = clipped.grads[i][j];
            avg[j] = state.alpha * avg[j] + (1.0 - state.alpha) * g * g;
            *p -= state.lr * g / (avg[j] + state.eps).sqrt();
        }
    }
    Ok(())
}
