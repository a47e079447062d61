//! Off-policy policy evaluation: per-trajectory importance weights computed
//! by replaying beliefs under the trained model, clipped weighted importance
//! sampling, and bootstrap confidence bounds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{ActorCritic, BehaviorHead};
use crate::belief::{init_belief, update_belief, AggregationNet};
use crate::config::OppeConfig;
use crate::diffcore::{ParameterSet, Tape};
use crate::envdata::{Terminal, Trajectory};
use crate::error::{CoreError, Result};
use crate::genmodel::{Diagnostics, Encoder, GenerativeModel};

/// Where log μ comes from: the jointly trained behavior head, or the log
/// densities recorded by the data generator. The oracle mode isolates the
/// estimator from μ-estimation error.
#[derive(Debug, Clone, Copy)]
pub enum BehaviorMode<'a> {
    Learned(&'a BehaviorHead),
    Oracle,
}

/// One decision along a replayed trajectory.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Aggregated belief vector the decision was taken from.
    pub belief: Vec<f64>,
    pub log_pi: f64,
    pub log_mu: f64,
}

/// The model stack needed to replay beliefs along recorded episodes.
pub struct Replayer<'a> {
    pub model: &'a GenerativeModel,
    pub encoder: &'a Encoder,
    pub aggregation: &'a AggregationNet,
    pub heads: &'a ActorCritic,
    pub params: &'a ParameterSet,
    pub n_particles: usize,
}

impl<'a> Replayer<'a> {
    /// Replays one episode and returns the (log π, log μ) pair of every
    /// decision, or `None` when a density came out non-finite and the
    /// trajectory must be excluded.
    pub fn trajectory_steps(
        &self,
        episode: &Trajectory,
        behavior: BehaviorMode,
        seed: u64,
        diag: &mut Diagnostics,
    ) -> Result<Option<Vec<StepTrace>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(false);
        let first = &episode.steps[0];
        let (mut filter, _) = init_belief(
            &mut tape,
            self.model,
            self.encoder,
            self.params,
            self.n_particles,
            &first.obs,
            &first.mask,
            &mut rng,
            diag,
        )?;
        let mut trace = Vec::with_capacity(episode.steps.len() - 1);
        for step in &episode.steps[1..] {
            let belief = self
                .aggregation
                .aggregate(&mut tape, self.params, &filter, None)?;
            let (pm, pv) = self.heads.policy(&mut tape, self.params, belief)?;
            let a = tape.constant(step.action.to_vec());
            let log_pi_node = tape.gauss_log_pdf(a, pm, pv, None)?;
            let log_pi = tape.scalar(log_pi_node);
            let log_mu = match behavior {
                BehaviorMode::Learned(head) => {
                    let n = head.log_prob(&mut tape, self.params, belief, &step.action)?;
                    tape.scalar(n)
                }
                BehaviorMode::Oracle => step.behavior_logprob.ok_or_else(|| {
                    CoreError::SchemaMismatch(
                        "oracle behavior densities requested but absent from the data".into(),
                    )
                })?,
            };
            if !log_pi.is_finite() || !log_mu.is_finite() {
                diag.weight_floor_hits += 1;
                return Ok(None);
            }
            trace.push(StepTrace {
                belief: tape.value(belief).to_vec(),
                log_pi,
                log_mu,
            });
            if step.terminal != Terminal::None {
                break;
            }
            let (next, _) = update_belief(
                &mut tape,
                &filter,
                self.model,
                self.encoder,
                self.params,
                &step.action,
                &step.obs,
                &step.mask,
                &mut rng,
                diag,
            )?;
            filter = next;
        }
        Ok(Some(trace))
    }

    /// log W_n = Σ (log π − log μ) over the episode's decisions.
    pub fn trajectory_log_weight(
        &self,
        episode: &Trajectory,
        behavior: BehaviorMode,
        seed: u64,
        diag: &mut Diagnostics,
    ) -> Result<Option<f64>> {
        Ok(self
            .trajectory_steps(episode, behavior, seed, diag)?
            .map(|steps| steps.iter().map(|s| s.log_pi - s.log_mu).sum()))
    }
}

/// Replay for the dense-observation baseline, where the belief is the encoded
/// current observation and no filtering is involved.
pub struct MdpReplayer<'a> {
    pub cvae: &'a crate::genmodel::MdpCvae,
    pub heads: &'a ActorCritic,
    pub behavior: &'a BehaviorHead,
    pub params: &'a ParameterSet,
}

impl<'a> MdpReplayer<'a> {
    pub fn trajectory_log_weight(
        &self,
        episode: &Trajectory,
        use_learned_behavior: bool,
        diag: &mut Diagnostics,
    ) -> Result<Option<f64>> {
        let mut tape = Tape::new(false);
        let mut logw = 0.0;
        for (prev, step) in episode.steps.iter().zip(&episode.steps[1..]) {
            let belief = self.cvae.belief(&mut tape, self.params, &prev.obs)?;
            let (pm, pv) = self.heads.policy(&mut tape, self.params, belief)?;
            let a = tape.constant(step.action.to_vec());
            let lp = tape.gauss_log_pdf(a, pm, pv, None)?;
            let log_pi = tape.scalar(lp);
            let log_mu = if use_learned_behavior {
                let n = self
                    .behavior
                    .log_prob(&mut tape, self.params, belief, &step.action)?;
                tape.scalar(n)
            } else {
                step.behavior_logprob.ok_or_else(|| {
                    CoreError::SchemaMismatch(
                        "oracle behavior densities requested but absent from the data".into(),
                    )
                })?
            };
            if !log_pi.is_finite() || !log_mu.is_finite() {
                diag.weight_floor_hits += 1;
                return Ok(None);
            }
            logw += log_pi - log_mu;
            if step.terminal != Terminal::None {
                break;
            }
        }
        Ok(Some(logw))
    }
}

/// One evaluated trajectory: its importance weight (log space) and its
/// undiscounted empirical return.
#[derive(Debug, Clone, Copy)]
pub struct WeightedReturn {
    pub log_weight: f64,
    pub empirical_return: f64,
}

fn clipped_weights(evals: &[WeightedReturn], cfg: &OppeConfig) -> Vec<f64> {
    evals
        .iter()
        .map(|e| e.log_weight.exp().clamp(cfg.weight_clip_min, cfg.weight_clip_max))
        .collect()
}

fn wis_from_clipped(weights: &[f64], evals: &[WeightedReturn]) -> f64 {
    let num: f64 = weights
        .iter()
        .zip(evals)
        .map(|(w, e)| w * e.empirical_return)
        .sum();
    num / weights.iter().sum::<f64>()
}

/// Clipped weighted importance sampling: R^WIS = Σ W̃_n R_n / Σ W̃_n.
pub fn wis_return(evals: &[WeightedReturn], cfg: &OppeConfig) -> Result<f64> {
    if evals.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let weights = clipped_weights(evals, cfg);
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(CoreError::DegenerateWeights);
    }
    Ok(wis_from_clipped(&weights, evals))
}

/// Unweighted behavior baseline R^μ = (1/N) Σ R_n.
pub fn behavior_return(evals: &[WeightedReturn]) -> f64 {
    evals.iter().map(|e| e.empirical_return).sum::<f64>() / evals.len() as f64
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub point_estimate: f64,
    pub lower_bound: f64,
    /// All resample estimates, in resample order.
    pub estimates: Vec<f64>,
}

const SEED_MIX: u64 = 0x9e3779b97f4a7c15;

/// Resamples the trajectory set with replacement `cfg.n_bootstrap` times and
/// takes the (1 − confidence) percentile of the WIS estimates as the lower
/// bound. Resamples run in parallel on private seeded streams and reduce in
/// index order, so the result is seed-deterministic.
pub fn bootstrap_bound(
    evals: &[WeightedReturn],
    cfg: &OppeConfig,
    seed: u64,
) -> Result<BootstrapResult> {
    let point_estimate = wis_return(evals, cfg)?;
    let n = evals.len();
    let estimates: Vec<f64> = (0..cfg.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_MIX.wrapping_mul(b as u64 + 1));
            let sample: Vec<WeightedReturn> =
                (0..n).map(|_| evals[rng.gen_range(0..n)]).collect();
            let weights = clipped_weights(&sample, cfg);
            wis_from_clipped(&weights, &sample)
        })
        .collect();
    let mut sorted = estimates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (((1.0 - cfg.confidence) * cfg.n_bootstrap as f64) as usize)
        .min(cfg.n_bootstrap - 1);
    Ok(BootstrapResult {
        point_estimate,
        lower_bound: sorted[idx],
        estimates,
    })
}

/// Equal-width bins over the estimate range, for the plot-ready histogram
/// file. A zero-width range puts all mass into one bin.
pub fn histogram(estimates: &[f64], n_bins: usize) -> Vec<(f64, f64, usize)> {
    assert!(n_bins >= 1 && !estimates.is_empty());
    let lo = estimates.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![(lo, hi, estimates.len())];
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &e in estimates {
        let i = (((e - lo) / width) as usize).min(n_bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}
