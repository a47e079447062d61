//! All tunable knobs, loadable from a single TOML file.

use crate::envdata::SepsisSimConfig;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Network and particle-filter dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub h_dim: usize,
    pub z_dim: usize,
    pub belief_dim: usize,
    pub fc_dim: usize,
    pub act_enc_dim: usize,
    pub obs_enc_dim: usize,
    pub weight_feat_dim: usize,
    /// particle population size K
    pub n_particles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_dim: 48,
            action_dim: 2,
            h_dim: 128,
            z_dim: 128,
            belief_dim: 128,
            fc_dim: 128,
            act_enc_dim: 64,
            obs_enc_dim: 128,
            weight_feat_dim: 64,
            n_particles: 15,
        }
    }
}

/// Suffix-tree search knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// expansions per tree N_s
    pub n_expansions: usize,
    /// parallel trees N_e
    pub n_trees: usize,
    /// ancestor/latent samples per action n_z
    pub n_z: usize,
    /// observations per latent n_zo
    pub n_zo: usize,
    /// sampled action-subspace size n_a
    pub n_actions: usize,
    /// softmax temperature β
    pub beta: f64,
    /// discount γ
    pub gamma: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_expansions: 20,
            n_trees: 16,
            n_z: 3,
            n_zo: 2,
            n_actions: 4,
            beta: 1.0,
            gamma: 0.99,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_expansions < 1
            || self.n_trees < 1
            || self.n_z < 1
            || self.n_zo < 1
            || self.n_actions < 1
        {
            return Err(CoreError::Config("search counts must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(CoreError::Config("beta must be > 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::Config("gamma must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Truncated-importance-ratio advantage estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// truncation ρ̄ on the TD-error ratio
    pub rho_bar: f64,
    /// truncation c̄ on the propagation ratio
    pub c_bar: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 1.0,
            rho_bar: 1.0,
            c_bar: 1.0,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CoreError::Config("lambda must be in [0,1]".into()));
        }
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return Err(CoreError::Config("require rho_bar >= c_bar > 0".into()));
        }
        Ok(())
    }
}

/// Relative weights of the five loss terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub value: f64,
    pub entropy: f64,
    pub elbo: f64,
    pub policy: f64,
    pub behavior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            value: 0.5,
            entropy: 0.01,
            elbo: 0.1,
            policy: 1.0,
            behavior: 1.0,
        }
    }
}

/// Training-loop knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// mini batch length L
    pub batch_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// RMSProp regularizer ε
    pub rmsprop_eps: f64,
    pub max_grad_norm: f64,
    /// run OPPE validation every this many optimizer iterations
    pub eval_every: usize,
    /// write a checkpoint every this many iterations (0 = only final)
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_len: 10,
            epochs: 5,
            learning_rate: 3e-4,
            rmsprop_eps: 1e-4,
            max_grad_norm: 0.5,
            eval_every: 500,
            checkpoint_every: 0,
        }
    }
}

/// Off-policy policy evaluation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OppeConfig {
    pub weight_clip_min: f64,
    pub weight_clip_max: f64,
    pub n_bootstrap: usize,
    pub confidence: f64,
}

impl Default for OppeConfig {
    fn default() -> Self {
        Self {
            weight_clip_min: 1e-30,
            weight_clip_max: 1e4,
            n_bootstrap: 2000,
            confidence: 0.95,
        }
    }
}

impl OppeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_clip_min > 0.0 && self.weight_clip_min <= self.weight_clip_max) {
            return Err(CoreError::Config("require 0 < W_min <= W_max".into()));
        }
        if self.n_bootstrap < 1 {
            return Err(CoreError::Config("n_bootstrap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whole-run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub advantage: AdvantageConfig,
    pub loss_weights: LossWeights,
    pub train: TrainConfig,
    pub oppe: OppeConfig,
    pub env: SepsisSimConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.advantage.validate()?;
        self.oppe.validate()?;
        if self.train.batch_len < 1 || self.train.epochs < 1 {
            return Err(CoreError::Config("batch_len and epochs must be >= 1".into()));
        }
        if self.model.n_particles < 1 {
            return Err(CoreError::Config("n_particles must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
