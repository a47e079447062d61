//! Synthetic partially observed treatment simulator and the scripted
//! stochastic behavior policy that generates offline datasets.
//!
//! Latent state: two non-negative severity channels s₁, s₂ plus nuisance
//! AR(1) channels. Each action dimension doses one severity channel; dosing
//! close to the (hidden) target dose shrinks severity, dosing error grows it.
//! The episode terminates with reward −10 when total severity crosses the
//! death threshold, and +10 on recovery or when the horizon runs out.
//! Observations are a fixed random linear read-out of the latent state with
//! additive noise, a few thresholded binary channels, and i.i.d. missingness.

use crate::error::{CoreError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const N_ACTION_DIMS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    None,
    Survival,
    Death,
}

impl Terminal {
    pub fn is_terminal(self) -> bool {
        self != Terminal::None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SepsisSimConfig {
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// trailing channels emitted as {0,1} threshold indicators
    pub n_binary: usize,
    /// hidden per-channel target-dose gain: ideal action is gain·severity
    pub drug_gain: [f64; 2],
    /// severity growth per unit of absolute dosing error
    pub err_growth: f64,
    /// severity shrink when dosing is accurate
    pub heal_rate: f64,
    /// baseline severity drift per step
    pub drift: f64,
    pub process_noise: f64,
    pub obs_noise: f64,
    pub missing_prob: f64,
    pub max_horizon: usize,
    pub death_threshold: f64,
    pub recovery_threshold: f64,
    pub init_severity_min: f64,
    pub init_severity_max: f64,
    /// seed for the fixed observation read-out matrix
    pub obs_map_seed: u64,
    /// behavior controller: a_i = clamp(gain_i·(s_i + ξ) + bias) + exploration
    pub behavior_gain: [f64; 2],
    pub behavior_bias: f64,
    pub behavior_indicator_noise: f64,
    pub behavior_action_noise: f64,
}

impl Default for SepsisSimConfig {
    fn default() -> Self {
        Self {
            latent_dim: 6,
            obs_dim: 48,
            n_binary: 4,
            drug_gain: [0.55, 0.7],
            err_growth: 0.85,
            heal_rate: 0.17,
            drift: 0.06,
            process_noise: 0.03,
            obs_noise: 0.12,
            missing_prob: 0.3,
            max_horizon: 18,
            death_threshold: 1.9,
            recovery_threshold: 0.25,
            init_severity_min: 0.35,
            init_severity_max: 0.85,
            obs_map_seed: 7,
            behavior_gain: [0.42, 0.55],
            behavior_bias: 0.04,
            behavior_indicator_noise: 0.26,
            behavior_action_noise: 0.11,
        }
    }
}

impl SepsisSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(CoreError::Config(
                "latent_dim must hold at least the two severity channels".into(),
            ));
        }
        if self.obs_dim < 1 || self.n_binary > self.obs_dim {
            return Err(CoreError::Config("invalid observation schema".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_prob) {
            return Err(CoreError::Config("missing_prob must be in [0,1]".into()));
        }
        if self.max_horizon < 1 {
            return Err(CoreError::Config("max_horizon must be >= 1".into()));
        }
        if !(self.death_threshold > self.recovery_threshold) {
            return Err(CoreError::Config(
                "death_threshold must exceed recovery_threshold".into(),
            ));
        }
        Ok(())
    }
}

/// Latent simulator state.
#[derive(Debug, Clone)]
pub struct Hidden {
    pub x: Vec<f64>,
    pub t: usize,
}

impl Hidden {
    pub fn severity(&self) -> (f64, f64) {
        (self.x[0], self.x[1])
    }
}

#[derive(Debug, Clone)]
pub struct SepsisSim {
    pub cfg: SepsisSimConfig,
    /// obs_dim × latent_dim read-out, fixed per obs_map_seed
    read_out: Vec<Vec<f64>>,
    /// per-binary-channel thresholds on the continuous pre-activation
    bin_thresholds: Vec<f64>,
}

impl SepsisSim {
    pub fn new(cfg: SepsisSimConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.obs_map_seed);
        let read_out = (0..cfg.obs_dim)
            .map(|row| {
                (0..cfg.latent_dim)
                    .map(|col| {
                        // Every channel reads the severity pair with a random
                        // sign/scale so severity is recoverable from fragments.
                        let base: f64 = StandardNormal.sample(&mut rng);
                        if col < 2 {
                            0.8 * base + if row % 2 == col % 2 { 0.6 } else { -0.3 }
                        } else {
                            0.5 * base
                        }
                    })
                    .collect()
            })
            .collect();
        let bin_thresholds = (0..cfg.n_binary).map(|_| rng.gen_range(-0.3..0.6)).collect();
        Ok(Self {
            cfg,
            read_out,
            bin_thresholds,
        })
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> (Hidden, Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; self.cfg.latent_dim];
        for s in x.iter_mut().take(2) {
            *s = rng.gen_range(self.cfg.init_severity_min..self.cfg.init_severity_max);
        }
        for v in x.iter_mut().skip(2) {
            let n: f64 = StandardNormal.sample(rng);
            *v = 0.3 * n;
        }
        let hidden = Hidden { x, t: 0 };
        let (obs, mask) = self.observe(&hidden, rng);
        (hidden, obs, mask)
    }

    /// One transition. Actions outside [0,1]² are clamped.
    pub fn step<R: Rng>(
        &self,
        hidden: &Hidden,
        action: [f64; 2],
        rng: &mut R,
    ) -> (Hidden, Vec<f64>, Vec<f64>, f64, Terminal) {
        let c = &self.cfg;
        let mut x = hidden.x.clone();
        for i in 0..2 {
            let a = action[i].clamp(0.0, 1.0);
            let target = (c.drug_gain[i] * x[i]).clamp(0.0, 1.0);
            let err = (a - target).abs();
            let noise: f64 = StandardNormal.sample(rng);
            x[i] = (x[i] + c.drift + c.err_growth * err - c.heal_rate
                + c.process_noise * noise)
                .max(0.0);
        }
        for v in x.iter_mut().skip(2) {
            let noise: f64 = StandardNormal.sample(rng);
            *v = 0.9 * *v + 0.2 * noise;
        }
        let next = Hidden { x, t: hidden.t + 1 };
        let total = next.x[0] + next.x[1];
        let terminal = if total >= c.death_threshold {
            Terminal::Death
        } else if total <= c.recovery_threshold || next.t >= c.max_horizon {
            Terminal::Survival
        } else {
            Terminal::None
        };
        let reward = match terminal {
            Terminal::None => 0.0,
            Terminal::Survival => 10.0,
            Terminal::Death => -10.0,
        };
        let (obs, mask) = self.observe(&next, rng);
        (next, obs, mask, reward, terminal)
    }

    /// Noisy read-out with missingness; masked entries carry the 0 sentinel.
    fn observe<R: Rng>(&self, hidden: &Hidden, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let c = &self.cfg;
        let n_cont = c.obs_dim - c.n_binary;
        let mut obs = vec![0.0; c.obs_dim];
        let mut mask = vec![0.0; c.obs_dim];
        for j in 0..c.obs_dim {
            let pre: f64 = self.read_out[j]
                .iter()
                .zip(&hidden.x)
                .map(|(w, v)| w * v)
                .sum();
            let noise: f64 = StandardNormal.sample(rng);
            let value = if j < n_cont {
                pre + c.obs_noise * noise
            } else {
                let th = self.bin_thresholds[j - n_cont];
                if pre + c.obs_noise * noise > th {
                    1.0
                } else {
                    0.0
                }
            };
            if rng.gen::<f64>() >= c.missing_prob {
                obs[j] = value;
                mask[j] = 1.0;
            }
        }
        (obs, mask)
    }

    pub fn schema(&self) -> Vec<super::dataset::VariableInfo> {
        let n_cont = self.cfg.obs_dim - self.cfg.n_binary;
        (0..self.cfg.obs_dim)
            .map(|j| super::dataset::VariableInfo {
                name: if j < n_cont {
                    format!("c{j:02}")
                } else {
                    format!("b{:02}", j - n_cont)
                },
                kind: if j < n_cont {
                    super::dataset::VariableKind::Continuous
                } else {
                    super::dataset::VariableKind::Binary
                },
            })
            .collect()
    }
}

/// Stochastic proportional controller on noisy severity indicators. The
/// resulting action is clamped to [0,1]²; the recorded log density is the
/// unclamped Gaussian evaluated at the stored action, which is exact away
/// from the boundary (the mean and noise scale keep clamping rare).
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    pub gain: [f64; 2],
    pub bias: f64,
    pub indicator_noise: f64,
    pub action_noise: f64,
}

impl BehaviorPolicy {
    pub fn from_config(cfg: &SepsisSimConfig) -> Self {
        Self {
            gain: cfg.behavior_gain,
            bias: cfg.behavior_bias,
            indicator_noise: cfg.behavior_indicator_noise,
            action_noise: cfg.behavior_action_noise,
        }
    }

    fn mean(&self, hidden: &Hidden, rng: &mut impl Rng) -> [f64; 2] {
        let mut m = [0.0; 2];
        for i in 0..2 {
            let xi: f64 = StandardNormal.sample(rng);
            let indicator = hidden.x[i] + self.indicator_noise * xi;
            m[i] = (self.gain[i] * indicator + self.bias).clamp(0.02, 0.98);
        }
        m
    }

    /// Draws an action and returns it with its log density.
    pub fn act<R: Rng>(&self, hidden: &Hidden, rng: &mut R) -> ([f64; 2], f64) {
        let m = self.mean(hidden, rng);
        let mut a = [0.0; 2];
        for i in 0..2 {
            let n: f64 = StandardNormal.sample(rng);
            a[i] = (m[i] + self.action_noise * n).clamp(0.0, 1.0);
        }
        (a, self.log_density(&m, &a))
    }

    fn log_density(&self, mean: &[f64; 2], action: &[f64; 2]) -> f64 {
        let var = self.action_noise * self.action_noise;
        action
            .iter()
            .zip(mean)
            .map(|(a, m)| {
                -0.5 * ((a - m).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
            })
            .sum()
    }
}

/// Dose-matching reference controller used in sanity checks: reads the true
/// severity and applies the exact target dose.
pub fn oracle_action(sim: &SepsisSim, hidden: &Hidden) -> [f64; 2] {
    [
        (sim.cfg.drug_gain[0] * hidden.x[0]).clamp(0.0, 1.0),
        (sim.cfg.drug_gain[1] * hidden.x[1]).clamp(0.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> SepsisSim {
        SepsisSim::new(SepsisSimConfig::default()).unwrap()
    }

    fn rollout<R: Rng>(
        sim: &SepsisSim,
        rng: &mut R,
        mut act: impl FnMut(&Hidden, &mut R) -> [f64; 2],
    ) -> f64 {
        let (mut h, _, _) = sim.reset(rng);
        loop {
            let a = act(&h, rng);
            let (h2, _, _, r, term) = sim.step(&h, a, rng);
            if term.is_terminal() {
                return r;
            }
            h = h2;
        }
    }

    #[test]
    fn zero_missingness_gives_full_mask() {
        let mut cfg = SepsisSimConfig::default();
        cfg.missing_prob = 0.0;
        let sim = SepsisSim::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, _, mask) = sim.reset(&mut rng);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn full_missingness_gives_empty_mask() {
        let mut cfg = SepsisSimConfig::default();
        cfg.missing_prob = 1.0;
        let sim = SepsisSim::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, obs, mask) = sim.reset(&mut rng);
        assert!(mask.iter().all(|&m| m == 0.0));
        assert!(obs.iter().all(|&o| o == 0.0), "masked entries carry 0");
    }

    #[test]
    fn empirical_missing_rate_matches_config() {
        let sim = sim();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000usize;
        let d = sim.cfg.obs_dim;
        let mut missing = vec![0usize; d];
        for _ in 0..n {
            let (_, _, mask) = sim.reset(&mut rng);
            for (c, &m) in missing.iter_mut().zip(&mask) {
                if m == 0.0 {
                    *c += 1;
                }
            }
        }
        let p = sim.cfg.missing_prob;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        // pooled rate within 3σ of its own (tighter) standard error
        let pooled = missing.iter().sum::<usize>() as f64 / (n * d) as f64;
        let pooled_sigma = (p * (1.0 - p) / (n * d) as f64).sqrt();
        assert!(
            (pooled - p).abs() < 3.0 * pooled_sigma,
            "pooled missing rate {pooled} vs {p}"
        );
        // per-variable rates with a family-wise (Bonferroni-style) threshold,
        // since 48 simultaneous 3σ checks would fail by chance alone
        for c in missing {
            let rate = c as f64 / n as f64;
            assert!(
                (rate - p).abs() < 4.5 * sigma,
                "missing rate {rate} vs {p} (4.5σ = {})",
                4.5 * sigma
            );
        }
    }

    #[test]
    fn nonterminal_reward_is_zero_and_terminals_pay() {
        let sim = sim();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_terminal = false;
        for _ in 0..50 {
            let (mut h, _, _) = sim.reset(&mut rng);
            loop {
                let (h2, _, _, r, term) = sim.step(&h, [0.5, 0.5], &mut rng);
                match term {
                    Terminal::None => assert_eq!(r, 0.0),
                    Terminal::Survival => {
                        assert_eq!(r, 10.0);
                        saw_terminal = true;
                    }
                    Terminal::Death => {
                        assert_eq!(r, -10.0);
                        saw_terminal = true;
                    }
                }
                if term.is_terminal() {
                    break;
                }
                h = h2;
            }
        }
        assert!(saw_terminal);
    }

    #[test]
    fn lethal_threshold_forces_death() {
        let mut cfg = SepsisSimConfig::default();
        cfg.death_threshold = 0.3;
        cfg.init_severity_min = 0.5;
        cfg.init_severity_max = 0.9;
        let sim = SepsisSim::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, _, _) = sim.reset(&mut rng);
        let (_, _, _, r, term) = sim.step(&h, [0.0, 0.0], &mut rng);
        assert_eq!(term, Terminal::Death);
        assert_eq!(r, -10.0);
    }

    #[test]
    fn horizon_exhaustion_is_survival() {
        let mut cfg = SepsisSimConfig::default();
        // freeze the dynamics mid-band so neither threshold can fire
        cfg.max_horizon = 3;
        cfg.err_growth = 0.0;
        cfg.heal_rate = 0.0;
        cfg.drift = 0.0;
        cfg.process_noise = 0.0;
        let sim = SepsisSim::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut h, _, _) = sim.reset(&mut rng);
        let mut last = (0.0, Terminal::None);
        for _ in 0..3 {
            let (h2, _, _, r, term) = sim.step(&h, [0.3, 0.3], &mut rng);
            last = (r, term);
            if term.is_terminal() {
                break;
            }
            h = h2;
        }
        assert_eq!(last.1, Terminal::Survival);
        assert_eq!(last.0, 10.0);
    }

    #[test]
    fn informed_dosing_beats_random_policy() {
        let sim = sim();
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut oracle_total = 0.0;
        for _ in 0..n {
            oracle_total += rollout(&sim, &mut rng, |h, _| oracle_action(&sim, h));
        }
        let mut random_total = 0.0;
        for _ in 0..n {
            random_total += rollout(&sim, &mut rng, |_, r| [r.gen(), r.gen()]);
        }
        assert!(
            oracle_total / n as f64 > random_total / n as f64 + 1.0,
            "oracle {} vs random {}",
            oracle_total / n as f64,
            random_total / n as f64
        );
    }

    #[test]
    fn behavior_policy_sits_between_random_and_oracle() {
        let sim = sim();
        let policy = BehaviorPolicy::from_config(&sim.cfg);
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut behavior_total = 0.0;
        for _ in 0..n {
            behavior_total += rollout(&sim, &mut rng, |h, r| policy.act(h, r).0);
        }
        let mut random_total = 0.0;
        for _ in 0..n {
            random_total += rollout(&sim, &mut rng, |_, r| [r.gen(), r.gen()]);
        }
        let mut oracle_total = 0.0;
        for _ in 0..n {
            oracle_total += rollout(&sim, &mut rng, |h, _| oracle_action(&sim, h));
        }
        let (b, ra, o) = (
            behavior_total / n as f64,
            random_total / n as f64,
            oracle_total / n as f64,
        );
        assert!(b > ra, "behavior {b} should beat random {ra}");
        assert!(o > b, "oracle {o} should leave headroom over behavior {b}");
    }

    #[test]
    fn behavior_log_density_is_a_proper_gaussian() {
        let policy = BehaviorPolicy {
            gain: [0.5, 0.5],
            bias: 0.0,
            indicator_noise: 0.0,
            action_noise: 0.1,
        };
        // direct two-dim Gaussian density at the mean
        let m = [0.4, 0.6];
        let lp = policy.log_density(&m, &m);
        let expect = -2.0 * 0.5 * ((0.01f64).ln() + (2.0 * std::f64::consts::PI).ln());
        assert!((lp - expect).abs() < 1e-12);
    }
}
