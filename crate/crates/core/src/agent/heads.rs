//! Actor-critic heads on the belief vector: target policy π, value V, and
//! the estimated behavior policy μ. All policies are diagonal Gaussians over
//! the two normalized dose dimensions.

use crate::config::ModelConfig;
use crate::diffcore::{gaussian, Activation, Dense, GaussianHead, NodeId, ParameterSet, Tape};
use crate::error::Result;
use rand::Rng;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone)]
pub struct ActorCritic {
    body: Dense,
    value: Dense,
    policy: GaussianHead,
}

#[derive(Debug, Clone)]
pub struct BehaviorHead {
    body: Dense,
    head: GaussianHead,
}

impl ActorCritic {
    pub fn new<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &ModelConfig) -> Self {
        let body = Dense::new(params, rng, "ac.body", cfg.belief_dim, cfg.fc_dim, Activation::Relu);
        let value = Dense::new(params, rng, "ac.value", cfg.fc_dim, 1, Activation::None);
        let policy = GaussianHead::new(params, rng, "ac.policy", cfg.fc_dim, cfg.action_dim);
        Self { body, value, policy }
    }

    pub fn value(&self, tape: &mut Tape, params: &ParameterSet, belief: NodeId) -> Result<NodeId> {
        let x = self.body.forward(tape, params, belief)?;
        self.value.forward(tape, params, x)
    }

    pub fn policy(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        belief: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let x = self.body.forward(tape, params, belief)?;
        self.policy.forward(tape, params, x)
    }

    /// Draws an action from π(·|b); the Gaussian sample is truncated onto the
    /// unit box at sampling time only (densities stay pre-truncation).
    pub fn sample_action<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        belief: NodeId,
        rng: &mut R,
    ) -> Result<[f64; 2]> {
        let (mean, var) = self.policy(tape, params, belief)?;
        let m = tape.value(mean);
        let v = tape.value(var);
        let mut a = [0.0; 2];
        for i in 0..2 {
            let n: f64 = gaussian::standard_normal_vec(1, rng)[0];
            a[i] = (m[i] + v[i].sqrt() * n).clamp(0.0, 1.0);
        }
        Ok(a)
    }
}

impl BehaviorHead {
    pub fn new<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &ModelConfig) -> Self {
        let body = Dense::new(params, rng, "mu.body", cfg.belief_dim, cfg.fc_dim, Activation::Relu);
        let head = GaussianHead::new(params, rng, "mu.head", cfg.fc_dim, cfg.action_dim);
        Self { body, head }
    }

    pub fn density(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        belief: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let x = self.body.forward(tape, params, belief)?;
        self.head.forward(tape, params, x)
    }

    pub fn log_prob(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        belief: NodeId,
        action: &[f64],
    ) -> Result<NodeId> {
        let (mean, var) = self.density(tape, params, belief)?;
        let a = tape.constant(action.to_vec());
        tape.gauss_log_pdf(a, mean, var, None)
    }
}

/// log π(a|b) and the closed-form entropy ½Σ(1 + log 2πσ²) of the diagonal
/// Gaussian, both as tape nodes.
pub fn policy_logprob_and_entropy(
    tape: &mut Tape,
    params: &ParameterSet,
    head: &ActorCritic,
    belief: NodeId,
    action: &[f64],
) -> Result<(NodeId, NodeId)> {
    let (mean, var) = head.policy(tape, params, belief)?;
    let a = tape.constant(action.to_vec());
    let logp = tape.gauss_log_pdf(a, mean, var, None)?;
    let entropy = gaussian_entropy_node(tape, var);
    Ok((logp, entropy))
}

/// ½Σ(1 + log 2π + log σ²) as a tape node with gradients into σ².
pub fn gaussian_entropy_node(tape: &mut Tape, var: NodeId) -> NodeId {
    let d = tape.value(var).len() as f64;
    let logv = tape.log(var);
    let s = tape.sum(logv);
    tape.affine(&[(0.5, s)], 0.5 * d * (1.0 + LN_2PI))
}
