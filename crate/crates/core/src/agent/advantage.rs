//! Off-policy advantage estimation with truncated per-decision importance
//! ratios: δ_s = ρ_s(r_s + γV(b_{s+1}) − V(b_s)), backward recursion
//! Â ← γ·c_i·Â + δ_i, terminal convention δ_T = ρ_T(r_T − V(b_T)).

use crate::config::AdvantageConfig;
use crate::error::{CoreError, Result};

/// ρ = min(π/μ, ρ̄) and c = λ·min(π/μ, c̄), with the comparison done in log
/// space so large ratios cannot overflow before truncation.
pub fn truncated_ratios(log_pi: f64, log_mu: f64, cfg: &AdvantageConfig) -> (f64, f64) {
    let log_ratio = log_pi - log_mu;
    let rho = log_ratio.min(cfg.rho_bar.ln()).exp();
    let c = cfg.lambda * log_ratio.min(cfg.c_bar.ln()).exp();
    (rho, c)
}

/// Advantages for one full trajectory segment `t_start..=T` ending at the
/// terminal step T. `rewards[i]`, `values[i]`, and `ratios[i] = (ρ_i, c_i)`
/// are aligned; the terminal δ omits the bootstrap term.
pub fn advantage_infinite(
    rewards: &[f64],
    values: &[f64],
    ratios: &[(f64, f64)],
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 || values.len() != n || ratios.len() != n {
        return Err(CoreError::Config(
            "advantage inputs must be aligned and non-empty".into(),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let (rho, c) = ratios[i];
        let delta = if i + 1 == n {
            rho * (rewards[i] - values[i])
        } else {
            rho * (rewards[i] + cfg.gamma * values[i + 1] - values[i])
        };
        acc = delta + cfg.gamma * c * acc;
        adv[i] = acc;
    }
    Ok(adv)
}

/// Batch-boundary variant: the segment does not reach the terminal, so the
/// last step's δ bootstraps from `next_value` = V(b_{t+L}) and the recursion
/// is seeded with the pre-accumulated `tail` advantage of the later steps.
pub fn advantage_with_next_value(
    rewards: &[f64],
    values: &[f64],
    next_value: f64,
    ratios: &[(f64, f64)],
    tail: f64,
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 || values.len() != n || ratios.len() != n {
        return Err(CoreError::Config(
            "advantage inputs must be aligned and non-empty".into(),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut acc = tail;
    for i in (0..n).rev() {
        let (rho, c) = ratios[i];
        let next_v = if i + 1 == n { next_value } else { values[i + 1] };
        let delta = rho * (rewards[i] + cfg.gamma * next_v - values[i]);
        acc = delta + cfg.gamma * c * acc;
        adv[i] = acc;
    }
    Ok(adv)
}

/// Pre-accumulates the tail sum Σ_{s} γ^{s}·(Π c)·δ_s for the steps after a
/// batch boundary, given their δ and c sequences in forward order. This is
/// the seed for `advantage_with_next_value`.
pub fn accumulate_tail(deltas: &[f64], cs: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for i in (0..deltas.len()).rev() {
        acc = deltas[i] + gamma * cs[i] * acc;
    }
    acc
}
