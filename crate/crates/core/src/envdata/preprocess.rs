//! Dataset preprocessing: min-max normalization to [0,1] with action
//! dilation a ← a^0.3, dense interpolation for the MDP baseline, and
//! variable subsetting.

use super::dataset::{Dataset, NormStat, VariableKind};
use crate::error::{CoreError, Result};

pub const ACTION_DILATION_EXPONENT: f64 = 0.3;

/// Per-variable min/max over observed (mask = 1) entries of the dataset.
/// Variables never observed get the degenerate stat {0, 0}.
pub fn compute_norm_stats(dataset: &Dataset) -> Vec<NormStat> {
    let d = dataset.header.obs_dim();
    let mut stats = vec![
        NormStat {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        d
    ];
    for traj in &dataset.trajectories {
        for step in &traj.steps {
            for j in 0..d {
                if step.mask[j] != 0.0 {
                    stats[j].min = stats[j].min.min(step.obs[j]);
                    stats[j].max = stats[j].max.max(step.obs[j]);
                }
            }
        }
    }
    for s in stats.iter_mut() {
        if !s.min.is_finite() {
            *s = NormStat { min: 0.0, max: 0.0 };
        }
    }
    stats
}

/// Scales observed entries to [0,1] with the given (training-split)
/// statistics, re-zeroes masked sentinels, and dilates both action
/// dimensions with a ← a^0.3. Idempotent: already-processed datasets pass
/// through untouched. Returns the number of zero-range variables, which are
/// mapped to the constant 0.
pub fn normalize_and_dilate(dataset: &mut Dataset, stats: &[NormStat]) -> Result<usize> {
    if stats.len() != dataset.header.obs_dim() {
        return Err(CoreError::SchemaMismatch(format!(
            "normalization stats cover {} variables, dataset has {}",
            stats.len(),
            dataset.header.obs_dim()
        )));
    }
    if dataset.header.normalized && dataset.header.actions_dilated {
        return Ok(0);
    }
    let zero_range = stats.iter().filter(|s| s.max <= s.min).count();
    for traj in dataset.trajectories.iter_mut() {
        for step in traj.steps.iter_mut() {
            if !dataset.header.normalized {
                for (j, s) in stats.iter().enumerate() {
                    if step.mask[j] == 0.0 {
                        step.obs[j] = 0.0;
                    } else if s.max > s.min {
                        step.obs[j] = ((step.obs[j] - s.min) / (s.max - s.min)).clamp(0.0, 1.0);
                    } else {
                        step.obs[j] = 0.0;
                    }
                }
            }
            if !dataset.header.actions_dilated {
                for a in step.action.iter_mut() {
                    *a = a.clamp(0.0, 1.0).powf(ACTION_DILATION_EXPONENT);
                }
            }
        }
    }
    dataset.header.normalization = Some(stats.to_vec());
    dataset.header.normalized = true;
    dataset.header.actions_dilated = true;
    Ok(zero_range)
}

/// Densifies every episode: continuous variables are linearly interpolated
/// between their nearest observed values (edges extended), binary variables
/// are held from the last observed value (first value extended backward).
/// Variables never observed in an episode fall back to `fallback_means`.
/// Output masks are all ones; observed values are preserved exactly.
/// Returns the number of never-observed (episode, variable) fallbacks.
pub fn interpolate_for_mdp(dataset: &mut Dataset, fallback_means: &[f64]) -> Result<usize> {
    let d = dataset.header.obs_dim();
    if fallback_means.len() != d {
        return Err(CoreError::SchemaMismatch(format!(
            "fallback means cover {} variables, dataset has {d}",
            fallback_means.len()
        )));
    }
    let kinds: Vec<VariableKind> = dataset.header.variables.iter().map(|v| v.kind).collect();
    let mut fallbacks = 0usize;
    for traj in dataset.trajectories.iter_mut() {
        let n = traj.steps.len();
        for j in 0..d {
            let observed: Vec<(usize, f64)> = traj
                .steps
                .iter()
                .enumerate()
                .filter(|(_, s)| s.mask[j] != 0.0)
                .map(|(t, s)| (t, s.obs[j]))
                .collect();
            if observed.is_empty() {
                fallbacks += 1;
                for s in traj.steps.iter_mut() {
                    s.obs[j] = fallback_means[j];
                }
            } else {
                for t in 0..n {
                    if traj.steps[t].mask[j] != 0.0 {
                        continue;
                    }
                    let next = observed.iter().find(|(ot, _)| *ot > t);
                    let prev = observed.iter().rev().find(|(ot, _)| *ot < t);
                    traj.steps[t].obs[j] = match (kinds[j], prev, next) {
                        // sample-and-hold for binaries, backward extension at the start
                        (VariableKind::Binary, Some((_, pv)), _) => *pv,
                        (VariableKind::Binary, None, Some((_, nv))) => *nv,
                        (VariableKind::Continuous, Some((pt, pv)), Some((nt, nv))) => {
                            let w = (t - pt) as f64 / (nt - pt) as f64;
                            pv + w * (nv - pv)
                        }
                        (VariableKind::Continuous, Some((_, pv)), None) => *pv,
                        (VariableKind::Continuous, None, Some((_, nv))) => *nv,
                        (_, None, None) => unreachable!("observed is non-empty"),
                    };
                }
            }
            for s in traj.steps.iter_mut() {
                s.mask[j] = 1.0;
            }
        }
    }
    Ok(fallbacks)
}

/// Deterministic variable preference order for nested subset selection: a
/// fixed shuffle of 0..obs_dim, so the first 20 entries are a subset of the
/// first 35.
pub fn variable_selection_order(obs_dim: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..obs_dim).collect();
    // Fisher-Yates with a fixed multiplicative hash stream
    let mut state = 0x243f6a8885a308d3u64;
    for i in (1..obs_dim).rev() {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let j = (state >> 33) as usize % (i + 1);
        order.swap(i, j);
    }
    order
}

/// Restricts the dataset to `keep`. With `drop_dims` the non-kept variables
/// are removed entirely (dimension-reduced dataset); otherwise they stay in
/// place with mask forced to 0 and the 0 sentinel.
pub fn mask_variables(dataset: &mut Dataset, keep: &[usize], drop_dims: bool) -> Result<()> {
    let d = dataset.header.obs_dim();
    for &k in keep {
        if k >= d {
            return Err(CoreError::UnknownVariable(k));
        }
    }
    let mut kept = vec![false; d];
    for &k in keep {
        kept[k] = true;
    }
    if kept.iter().all(|&k| k) && !drop_dims {
        return Ok(());
    }
    for traj in dataset.trajectories.iter_mut() {
        for step in traj.steps.iter_mut() {
            if drop_dims {
                step.obs = filter_kept(&step.obs, &kept);
                step.mask = filter_kept(&step.mask, &kept);
            } else {
                for j in 0..d {
                    if !kept[j] {
                        step.obs[j] = 0.0;
                        step.mask[j] = 0.0;
                    }
                }
            }
        }
    }
    if drop_dims {
        let vars = std::mem::take(&mut dataset.header.variables);
        dataset.header.variables = vars
            .into_iter()
            .enumerate()
            .filter(|(j, _)| kept[*j])
            .map(|(_, v)| v)
            .collect();
        if let Some(stats) = dataset.header.normalization.take() {
            dataset.header.normalization = Some(
                stats
                    .into_iter()
                    .enumerate()
                    .filter(|(j, _)| kept[*j])
                    .map(|(_, s)| s)
                    .collect(),
            );
        }
    }
    Ok(())
}

fn filter_kept(values: &[f64], kept: &[bool]) -> Vec<f64> {
    values
        .iter()
        .zip(kept)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .collect()
}

/// Column means over observed entries; falls back to 0 for never-observed
/// variables. Used as the interpolation fallback and the masked sentinel base.
pub fn observed_means(dataset: &Dataset) -> Vec<f64> {
    let d = dataset.header.obs_dim();
    let mut sum = vec![0.0; d];
    let mut count = vec![0usize; d];
    for traj in &dataset.trajectories {
        for step in &traj.steps {
            for j in 0..d {
                if step.mask[j] != 0.0 {
                    sum[j] += step.obs[j];
                    count[j] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}
