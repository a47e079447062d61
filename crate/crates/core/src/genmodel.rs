//! Sequential variational generative model: decoder (initial density,
//! transition prior, observation density, recurrent transition), encoder,
//! per-particle importance weights, the step-likelihood ELBO loss, and the
//! conditional-VAE variant used when trajectories are modelled as MDPs.

use crate::config::ModelConfig;
use crate::diffcore::{
    gaussian, Activation, Dense, GaussianHead, GaussianParams, Mlp, NodeId, ParamId, ParameterSet,
    Tape, TensorValue,
};
use crate::error::Result;
use rand::Rng;

/// Log-weight floor; exp(-708) is the smallest positive normal double.
pub const LOG_WEIGHT_FLOOR: f64 = -708.0;

/// Counters for numerically degenerate events. Purely informational.
#[derive(Debug, Clone, Copy, Default)]
pub struct Diagnostics {
    pub weight_floor_hits: u64,
    pub degenerate_resamples: u64,
    pub skipped_elbo_steps: u64,
    pub eta_floor_hits: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.weight_floor_hits += other.weight_floor_hits;
        self.degenerate_resamples += other.degenerate_resamples;
        self.skipped_elbo_steps += other.skipped_elbo_steps;
        self.eta_floor_hits += other.eta_floor_hits;
    }
}

/// Decoder components parameterized by θ plus the shared input encoders.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub obs_dim: usize,
    pub z_dim: usize,
    pub h_dim: usize,
    h0_mean: ParamId,
    pub act_enc: Dense,
    pub obs_enc: Mlp,
    prior_body: Mlp,
    prior_head: GaussianHead,
    obs_body: Mlp,
    obs_head: GaussianHead,
    rnn: crate::diffcore::GruCell,
}

/// q_φ(z | h_prev, a_prev, o).
#[derive(Debug, Clone)]
pub struct Encoder {
    body: Mlp,
    head: GaussianHead,
}

impl GenerativeModel {
    pub fn new<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &ModelConfig) -> Self {
        let h0_mean = params.register("gen.h0_mean", TensorValue::zeros(vec![cfg.h_dim]));
        let act_enc = Dense::new(
            params,
            rng,
            "gen.act_enc",
            cfg.action_dim,
            cfg.act_enc_dim,
            Activation::Relu,
        );
        let obs_enc = Mlp::new(
            params,
            rng,
            "gen.obs_enc",
            &[cfg.obs_dim, cfg.fc_dim, cfg.obs_enc_dim],
            Activation::Relu,
        );
        let prior_in = cfg.h_dim + cfg.act_enc_dim;
        let prior_body = Mlp::new(
            params,
            rng,
            "gen.prior",
            &[prior_in, cfg.fc_dim, cfg.fc_dim],
            Activation::Relu,
        );
        let prior_head = GaussianHead::new(params, rng, "gen.prior", cfg.fc_dim, cfg.z_dim);
        let obs_in = cfg.z_dim + cfg.h_dim + cfg.act_enc_dim;
        let obs_body = Mlp::new(
            params,
            rng,
            "gen.obs",
            &[obs_in, cfg.fc_dim, cfg.fc_dim],
            Activation::Relu,
        );
        let obs_head = GaussianHead::new(params, rng, "gen.obs", cfg.fc_dim, cfg.obs_dim);
        let rnn_in = cfg.z_dim + cfg.act_enc_dim + cfg.obs_enc_dim;
        let rnn = crate::diffcore::GruCell::new(params, rng, "gen.rnn", rnn_in, cfg.h_dim);
        Self {
            obs_dim: cfg.obs_dim,
            z_dim: cfg.z_dim,
            h_dim: cfg.h_dim,
            h0_mean,
            act_enc,
            obs_enc,
            prior_body,
            prior_head,
            obs_body,
            obs_head,
            rnn,
        }
    }

    pub fn encode_action(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        action: &[f64],
    ) -> Result<NodeId> {
        let a = tape.constant(action.to_vec());
        self.act_enc.forward(tape, params, a)
    }

    /// Missing entries are imputed with 0 before encoding; the statistical
    /// treatment of missingness lives in the masked observation density.
    pub fn encode_obs(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        obs: &[f64],
        mask: &[f64],
    ) -> Result<NodeId> {
        let imputed: Vec<f64> = obs
            .iter()
            .zip(mask)
            .map(|(o, m)| if *m == 0.0 { 0.0 } else { *o })
            .collect();
        let o = tape.constant(imputed);
        self.obs_enc.forward(tape, params, o)
    }

    /// p_θ(z | h_prev, a_prev).
    pub fn transition_prior(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        h_prev: NodeId,
        a_enc: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let x = tape.concat(&[h_prev, a_enc]);
        let b = self.prior_body.forward(tape, params, x)?;
        self.prior_head.forward(tape, params, b)
    }

    /// p_θ(o | z, h_prev, a_prev).
    pub fn observation_density(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        z: NodeId,
        h_prev: NodeId,
        a_enc: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let x = tape.concat(&[z, h_prev, a_enc]);
        let b = self.obs_body.forward(tape, params, x)?;
        self.obs_head.forward(tape, params, b)
    }

    /// h_t = Υ_RNN(h_prev, z, a_prev, o).
    pub fn rnn_next(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        h_prev: NodeId,
        z: NodeId,
        a_enc: NodeId,
        o_enc: NodeId,
    ) -> Result<NodeId> {
        let x = tape.concat(&[z, a_enc, o_enc]);
        self.rnn.step(tape, params, h_prev, x)
    }

    /// Initial hidden state: tanh-squashed draw around a learnable mean, so
    /// h₀ lands in the (−1, 1) range the recurrent update preserves.
    pub fn sample_h0<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        rng: &mut R,
    ) -> NodeId {
        let m = tape.param_vec(params, self.h0_mean);
        let noise = tape.constant(gaussian::standard_normal_vec(self.h_dim, rng));
        let s = tape.add(m, noise);
        tape.tanh(s)
    }

    /// Draws o ~ p_θ(·|z, h_prev, a); simulated observations carry a full mask.
    pub fn simulate_observation<R: Rng>(
        &self,
        params: &ParameterSet,
        z: &[f64],
        h_prev: &[f64],
        action: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(false);
        let zn = tape.constant(z.to_vec());
        let hn = tape.constant(h_prev.to_vec());
        let a_enc = self.encode_action(&mut tape, params, action)?;
        let (mean, var) = self.observation_density(&mut tape, params, zn, hn, a_enc)?;
        let p = GaussianParams::new(tape.value(mean).to_vec(), tape.value(var).to_vec())?;
        let noise = gaussian::standard_normal_vec(self.obs_dim, rng);
        let o = gaussian::reparam_sample(&p, &noise)?;
        Ok((o, vec![1.0; self.obs_dim]))
    }
}

impl Encoder {
    pub fn new<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &ModelConfig) -> Self {
        let in_dim = cfg.h_dim + cfg.act_enc_dim + cfg.obs_enc_dim;
        let body = Mlp::new(
            params,
            rng,
            "enc.q",
            &[in_dim, cfg.fc_dim, cfg.fc_dim],
            Activation::Relu,
        );
        let head = GaussianHead::new(params, rng, "enc.q", cfg.fc_dim, cfg.z_dim);
        Self { body, head }
    }

    /// q_φ(z | h_prev, a_prev, o). Inputs arrive pre-encoded.
    pub fn encode_posterior(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        h_prev: NodeId,
        a_enc: NodeId,
        o_enc: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let x = tape.concat(&[h_prev, a_enc, o_enc]);
        let b = self.body.forward(tape, params, x)?;
        self.head.forward(tape, params, b)
    }
}

/// log w = log p_θ(z|h,a) + log p_θ(o|z,h,a) − log q_φ(z|h,a,o), with the
/// observation term masked. Non-finite intermediates floor the weight.
#[allow(clippy::too_many_arguments)]
pub fn particle_log_weight(
    tape: &mut Tape,
    model: &GenerativeModel,
    params: &ParameterSet,
    z: NodeId,
    h_prev: NodeId,
    a_enc: NodeId,
    obs: &[f64],
    mask: &[f64],
    q_mean: NodeId,
    q_var: NodeId,
    diag: &mut Diagnostics,
) -> Result<NodeId> {
    let (pm, pv) = model.transition_prior(tape, params, h_prev, a_enc)?;
    let log_prior = tape.gauss_log_pdf(z, pm, pv, None)?;
    let (om, ov) = model.observation_density(tape, params, z, h_prev, a_enc)?;
    let o_node = tape.constant(obs.to_vec());
    let log_obs = tape.gauss_log_pdf(o_node, om, ov, Some(mask))?;
    let log_q = tape.gauss_log_pdf(z, q_mean, q_var, None)?;
    let logw = tape.affine(&[(1.0, log_prior), (1.0, log_obs), (-1.0, log_q)], 0.0);
    if !tape.scalar(logw).is_finite() || tape.scalar(logw) < LOG_WEIGHT_FLOOR {
        diag.weight_floor_hits += 1;
        return Ok(tape.scalar_const(LOG_WEIGHT_FLOOR));
    }
    Ok(logw)
}

/// L_ELBO = −(1/L) Σ_τ logsumexp(logw_τ − log K). Steps whose weights all sit
/// at the underflow floor are skipped.
pub fn elbo_loss(tape: &mut Tape, step_log_weights: &[Vec<NodeId>], diag: &mut Diagnostics) -> NodeId {
    assert!(!step_log_weights.is_empty());
    let l = step_log_weights.len();
    let mut terms: Vec<(f64, NodeId)> = Vec::new();
    for step in step_log_weights {
        assert!(!step.is_empty());
        if step.iter().all(|&w| tape.scalar(w) <= LOG_WEIGHT_FLOOR) {
            diag.skipped_elbo_steps += 1;
            continue;
        }
        let k = step.len() as f64;
        let v = tape.concat(step);
        let lse = tape.logsumexp(v);
        let log_mean = tape.affine(&[(1.0, lse)], -k.ln());
        terms.push((-1.0 / l as f64, log_mean));
    }
    if terms.is_empty() {
        return tape.scalar_const(0.0);
    }
    tape.affine(&terms, 0.0)
}

/// Conditional VAE for the MDP baseline: p_θ(o₀), p_θ(o_t|z_t, o_{t−1}, a_{t−1}),
/// q_φ(z_t|o_t, o_{t−1}, a_{t−1}). Operates on dense (interpolated) observations.
#[derive(Debug, Clone)]
pub struct MdpCvae {
    pub obs_dim: usize,
    pub z_dim: usize,
    o0_mean: ParamId,
    o0_logvar: ParamId,
    pub act_enc: Dense,
    pub obs_enc: Mlp,
    /// o_enc → belief space, the MDP stand-in for a belief state
    pub belief_enc: Dense,
    dec_body: Mlp,
    dec_head: GaussianHead,
    q_body: Mlp,
    q_head: GaussianHead,
}

impl MdpCvae {
    pub fn new<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &ModelConfig) -> Self {
        let o0_mean = params.register("cvae.o0_mean", TensorValue::zeros(vec![cfg.obs_dim]));
        let o0_logvar = params.register("cvae.o0_logvar", TensorValue::zeros(vec![cfg.obs_dim]));
        let act_enc = Dense::new(
            params,
            rng,
            "cvae.act_enc",
            cfg.action_dim,
            cfg.act_enc_dim,
            Activation::Relu,
        );
        let obs_enc = Mlp::new(
            params,
            rng,
            "cvae.obs_enc",
            &[cfg.obs_dim, cfg.fc_dim, cfg.obs_enc_dim],
            Activation::Relu,
        );
        let belief_enc = Dense::new(
            params,
            rng,
            "cvae.belief",
            cfg.obs_enc_dim,
            cfg.belief_dim,
            Activation::None,
        );
        let dec_in = cfg.z_dim + cfg.obs_enc_dim + cfg.act_enc_dim;
        let dec_body = Mlp::new(
            params,
            rng,
            "cvae.dec",
            &[dec_in, cfg.fc_dim, cfg.fc_dim],
            Activation::Relu,
        );
        let dec_head = GaussianHead::new(params, rng, "cvae.dec", cfg.fc_dim, cfg.obs_dim);
        let q_in = 2 * cfg.obs_enc_dim + cfg.act_enc_dim;
        let q_body = Mlp::new(
            params,
            rng,
            "cvae.q",
            &[q_in, cfg.fc_dim, cfg.fc_dim],
            Activation::Relu,
        );
        let q_head = GaussianHead::new(params, rng, "cvae.q", cfg.fc_dim, cfg.z_dim);
        Self {
            obs_dim: cfg.obs_dim,
            z_dim: cfg.z_dim,
            o0_mean,
            o0_logvar,
            act_enc,
            obs_enc,
            belief_enc,
            dec_body,
            dec_head,
            q_body,
            q_head,
        }
    }

    /// Encoded current observation, used wherever the POMDP path uses b.
    pub fn belief(&self, tape: &mut Tape, params: &ParameterSet, obs: &[f64]) -> Result<NodeId> {
        let o = tape.constant(obs.to_vec());
        let e = self.obs_enc.forward(tape, params, o)?;
        self.belief_enc.forward(tape, params, e)
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        z: NodeId,
        o_prev: &[f64],
        action: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        let op = tape.constant(o_prev.to_vec());
        let oe = self.obs_enc.forward(tape, params, op)?;
        let a = tape.constant(action.to_vec());
        let ae = self.act_enc.forward(tape, params, a)?;
        let x = tape.concat(&[z, oe, ae]);
        let b = self.dec_body.forward(tape, params, x)?;
        self.dec_head.forward(tape, params, b)
    }

    pub fn posterior(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        obs: &[f64],
        o_prev: &[f64],
        action: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        let o = tape.constant(obs.to_vec());
        let oe = self.obs_enc.forward(tape, params, o)?;
        let op = tape.constant(o_prev.to_vec());
        let ope = self.obs_enc.forward(tape, params, op)?;
        let a = tape.constant(action.to_vec());
        let ae = self.act_enc.forward(tape, params, a)?;
        let x = tape.concat(&[oe, ope, ae]);
        let b = self.q_body.forward(tape, params, x)?;
        self.q_head.forward(tape, params, b)
    }

    /// −log p_θ(o₀ = o) under the learnable initial density.
    pub fn init_loss(&self, tape: &mut Tape, params: &ParameterSet, obs: &[f64]) -> Result<NodeId> {
        let m = tape.param_vec(params, self.o0_mean);
        let lv = tape.param_vec(params, self.o0_logvar);
        let v = tape.exp(lv);
        let v = tape.clamp_min(v, crate::diffcore::VAR_FLOOR);
        let o = tape.constant(obs.to_vec());
        let lp = tape.gauss_log_pdf(o, m, v, None)?;
        Ok(tape.scale(lp, -1.0))
    }

    /// Single-sample negative ELBO with a standard-normal latent prior:
    /// −[log p_θ(o|z,o_prev,a) + log N(z;0,I) − log q_φ(z|o,o_prev,a)].
    pub fn step_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        o_prev: &[f64],
        action: &[f64],
        obs: &[f64],
        mask: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<NodeId> {
        let (qm, qv) = self.posterior(tape, params, obs, o_prev, action)?;
        let noise = gaussian::standard_normal_vec(self.z_dim, rng);
        let z = tape.reparam(qm, qv, &noise)?;
        let log_q = tape.gauss_log_pdf(z, qm, qv, None)?;
        let prior_m = tape.constant(vec![0.0; self.z_dim]);
        let prior_v = tape.constant(vec![1.0; self.z_dim]);
        let log_prior = tape.gauss_log_pdf(z, prior_m, prior_v, None)?;
        let (dm, dv) = self.decode(tape, params, z, o_prev, action)?;
        let o = tape.constant(obs.to_vec());
        let log_obs = tape.gauss_log_pdf(o, dm, dv, mask)?;
        Ok(tape.affine(
            &[(-1.0, log_obs), (-1.0, log_prior), (1.0, log_q)],
            0.0,
        ))
    }

    /// Draws a successor observation through the conditional decoder.
    pub fn simulate_observation<R: Rng>(
        &self,
        params: &ParameterSet,
        o_prev: &[f64],
        action: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(false);
        let noise = gaussian::standard_normal_vec(self.z_dim, rng);
        let z = tape.constant(noise);
        let (m, v) = self.decode(&mut tape, params, z, o_prev, action)?;
        let p = GaussianParams::new(tape.value(m).to_vec(), tape.value(v).to_vec())?;
        let n2 = gaussian::standard_normal_vec(self.obs_dim, rng);
        gaussian::reparam_sample(&p, &n2)
    }
}
