//! Value-level diagonal-Gaussian utilities for evaluation-time code paths
//! (policy sampling, importance ratios, simulation). Training-time densities
//! go through `Tape::gauss_log_pdf` so the two share one formula per test.

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Mean and strictly positive diagonal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(CoreError::ShapeMismatch {
                context: "GaussianParams",
                expected: mean.len(),
                got: var.len(),
            });
        }
        if let Some(&v) = var.iter().find(|v| **v <= 0.0) {
            return Err(CoreError::NonPositiveVariance(v));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Masked log density; dimensions with mask 0 contribute exactly 0.
pub fn gaussian_log_density(x: &[f64], p: &GaussianParams, mask: Option<&[f64]>) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "gaussian_log_density",
            expected: p.dim(),
            got: x.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(CoreError::ShapeMismatch {
                context: "gaussian_log_density mask",
                expected: x.len(),
                got: m.len(),
            });
        }
    }
    let mut lp = 0.0;
    for d in 0..x.len() {
        if mask.map_or(1.0, |m| m[d]) == 0.0 {
            continue;
        }
        let v = p.var[d];
        if v <= 0.0 {
            return Err(CoreError::NonPositiveVariance(v));
        }
        let r = x[d] - p.mean[d];
        lp += -0.5 * (LN_2PI + v.ln() + r * r / v);
    }
    Ok(lp)
}

/// mean + sqrt(var) ⊙ noise.
pub fn reparam_sample(p: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "reparam_sample noise",
            expected: p.dim(),
            got: noise.len(),
        });
    }
    Ok((0..p.dim())
        .map(|d| p.mean[d] + p.var[d].sqrt() * noise[d])
        .collect())
}

pub fn sample<R: Rng>(p: &GaussianParams, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..p.dim()).map(|_| rng.sample(StandardNormal)).collect();
    reparam_sample(p, &noise).expect("dims match by construction")
}

/// Closed-form entropy ½ Σ (1 + log 2π σ²).
pub fn gaussian_entropy(var: &[f64]) -> f64 {
    var.iter().map(|v| 0.5 * (1.0 + LN_2PI + v.ln())).sum()
}

pub fn standard_normal_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}
