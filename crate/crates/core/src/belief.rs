//! Particle-filter belief states: initialization, the per-step
//! mutation-selection update, ancestor resampling, and the trained
//! aggregation of the particle population into a single belief vector.

use crate::config::ModelConfig;
use crate::diffcore::{gaussian, Activation, Dense, Mlp, NodeId, ParameterSet, Tape};
use crate::error::Result;
use crate::genmodel::{particle_log_weight, Diagnostics, Encoder, GenerativeModel, LOG_WEIGHT_FLOOR};
use rand::Rng;

/// Numerically stable log Σ exp over plain values.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Draws K ancestor indices i.i.d. with probability w_i/Σw, computed from
/// log-weights with max-subtraction. If every weight sits at the underflow
/// floor the draw degrades to uniform and the diagnostic is incremented.
pub fn resample_ancestors<R: Rng>(
    log_weights: &[f64],
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Vec<usize> {
    let k = log_weights.len();
    if log_weights.iter().all(|&w| w <= LOG_WEIGHT_FLOOR) {
        diag.degenerate_resamples += 1;
        return (0..k).map(|_| rng.gen_range(0..k)).collect();
    }
    let z = logsumexp(log_weights);
    let probs: Vec<f64> = log_weights.iter().map(|&w| (w - z).exp()).collect();
    (0..k)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            k - 1
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Generic value-level filter, used to check the machinery against exact
// oracles on models whose posterior is computable in closed form.
// ---------------------------------------------------------------------------

/// A sequential latent-variable model a particle filter can run on: propose a
/// successor state and return its incremental importance log-weight.
pub trait SequentialModel {
    type State: Clone;
    type Action;
    type Obs;
    fn init_state<R: Rng>(&self, rng: &mut R) -> Self::State;
    fn propose<R: Rng>(
        &self,
        prev: &Self::State,
        action: &Self::Action,
        obs: &Self::Obs,
        rng: &mut R,
    ) -> (Self::State, f64);
}

#[derive(Debug, Clone)]
pub struct GenericFilter<S> {
    pub states: Vec<S>,
    pub log_weights: Vec<f64>,
    /// running Σ_t (logsumexp(logw_t) − log K): the log of Eq.-3-style
    /// evidence, the product of per-step mean weights
    pub log_evidence: f64,
    /// per-step mean-weight trace in log space
    pub step_factors: Vec<f64>,
    pub diag: Diagnostics,
}

impl<S: Clone> GenericFilter<S> {
    pub fn init<M, R>(model: &M, k: usize, rng: &mut R) -> Self
    where
        M: SequentialModel<State = S>,
        R: Rng,
    {
        Self {
            states: (0..k).map(|_| model.init_state(rng)).collect(),
            log_weights: vec![0.0; k],
            log_evidence: 0.0,
            step_factors: Vec::new(),
            diag: Diagnostics::default(),
        }
    }

    /// Resample ancestors, propose successors, reweight.
    pub fn step<M, R>(&mut self, model: &M, action: &M::Action, obs: &M::Obs, rng: &mut R)
    where
        M: SequentialModel<State = S>,
        R: Rng,
    {
        let k = self.states.len();
        let ancestors = resample_ancestors(&self.log_weights, rng, &mut self.diag);
        let mut states = Vec::with_capacity(k);
        let mut log_weights = Vec::with_capacity(k);
        for &a in &ancestors {
            let (s, logw) = model.propose(&self.states[a], action, obs, rng);
            states.push(s);
            log_weights.push(logw.max(LOG_WEIGHT_FLOOR));
        }
        let factor = logsumexp(&log_weights) - (k as f64).ln();
        self.states = states;
        self.log_weights = log_weights;
        self.log_evidence += factor;
        self.step_factors.push(factor);
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let z = logsumexp(&self.log_weights);
        self.log_weights.iter().map(|&w| (w - z).exp()).collect()
    }
}

// ---------------------------------------------------------------------------
// Traced filter over the learned generative model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Particle {
    pub h: NodeId,
    pub z: NodeId,
    pub logw: NodeId,
}

/// Particle population living on a tape. One filter per trajectory segment;
/// with recording disabled the same code path serves simulation.
#[derive(Debug, Clone)]
pub struct BeliefFilter {
    pub particles: Vec<Particle>,
    /// log of the latest per-step mean weight (the Eq. 3 step factor)
    pub step_factor: f64,
    /// running sum of step factors since initialization
    pub log_evidence: f64,
}

/// Detached snapshot of a filter, used to carry beliefs across tape
/// boundaries (batch segmentation, tree workers).
#[derive(Debug, Clone)]
pub struct FilterState {
    pub h: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub step_factor: f64,
    pub log_evidence: f64,
}

/// The step's per-particle log-weight nodes, handed to the ELBO.
pub type StepWeights = Vec<NodeId>;

impl BeliefFilter {
    pub fn k(&self) -> usize {
        self.particles.len()
    }

    pub fn log_weight_values(&self, tape: &Tape) -> Vec<f64> {
        self.particles.iter().map(|p| tape.scalar(p.logw)).collect()
    }

    pub fn snapshot(&self, tape: &Tape) -> FilterState {
        FilterState {
            h: self.particles.iter().map(|p| tape.value(p.h).to_vec()).collect(),
            z: self.particles.iter().map(|p| tape.value(p.z).to_vec()).collect(),
            log_weights: self.log_weight_values(tape),
            step_factor: self.step_factor,
            log_evidence: self.log_evidence,
        }
    }

    /// Re-materializes a snapshot as constants on `tape` (no gradient links).
    pub fn restore(tape: &mut Tape, state: &FilterState) -> Self {
        let particles = state
            .h
            .iter()
            .zip(&state.z)
            .zip(&state.log_weights)
            .map(|((h, z), &w)| Particle {
                h: tape.constant(h.clone()),
                z: tape.constant(z.clone()),
                logw: tape.scalar_const(w),
            })
            .collect();
        Self {
            particles,
            step_factor: state.step_factor,
            log_evidence: state.log_evidence,
        }
    }

    /// Line-oriented debug dump: one particle per line with log-weight and
    /// vector norms.
    pub fn dump(&self, tape: &Tape) -> String {
        let mut out = String::new();
        for (i, p) in self.particles.iter().enumerate() {
            let hn = tape.value(p.h).iter().map(|v| v * v).sum::<f64>().sqrt();
            let zn = tape.value(p.z).iter().map(|v| v * v).sum::<f64>().sqrt();
            out.push_str(&format!(
                "particle {i} logw {:+.6e} |h| {:.6e} |z| {:.6e}\n",
                tape.scalar(p.logw),
                hn,
                zn
            ));
        }
        out
    }
}

/// Encodes the particle population into the belief vector. Each particle
/// contributes encoder(h ⊕ z ⊕ weightfeature(normalized w)); the K features
/// are concatenated in filter order and mapped to belief space by one output
/// layer. Permutation robustness is trained, not structural: the trainer
/// shuffles particle order before aggregation, evaluation uses filter order.
#[derive(Debug, Clone)]
pub struct AggregationNet {
    weight_fc: Dense,
    particle_enc: Mlp,
    output: Dense,
    n_particles: usize,
}

impl AggregationNet {
    pub fn new<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &ModelConfig) -> Self {
        let weight_fc = Dense::new(params, rng, "agg.weight", 1, cfg.weight_feat_dim, Activation::Relu);
        let in_dim = cfg.h_dim + cfg.z_dim + cfg.weight_feat_dim;
        let particle_enc = Mlp::new(
            params,
            rng,
            "agg.particle",
            &[in_dim, cfg.fc_dim, cfg.fc_dim],
            Activation::Relu,
        );
        let output = Dense::new(
            params,
            rng,
            "agg.output",
            cfg.n_particles * cfg.fc_dim,
            cfg.belief_dim,
            Activation::None,
        );
        Self {
            weight_fc,
            particle_enc,
            output,
            n_particles: cfg.n_particles,
        }
    }

    /// `order` permutes the particle slots before concatenation (training
    /// shuffles); `None` keeps filter order.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        filter: &BeliefFilter,
        order: Option<&[usize]>,
    ) -> Result<NodeId> {
        assert_eq!(filter.k(), self.n_particles, "filter size fixed at K");
        let logw: Vec<NodeId> = filter.particles.iter().map(|p| p.logw).collect();
        let logw_vec = tape.concat(&logw);
        let normalized = tape.softmax(logw_vec);
        let mut features = Vec::with_capacity(filter.k());
        for slot in 0..filter.k() {
            let i = order.map_or(slot, |o| o[slot]);
            let p = &filter.particles[i];
            let w = tape.slice(normalized, i, 1);
            let wf = self.weight_fc.forward(tape, params, w)?;
            let x = tape.concat(&[p.h, p.z, wf]);
            features.push(self.particle_enc.forward(tape, params, x)?);
        }
        let all = tape.concat(&features);
        self.output.forward(tape, params, all)
    }
}

/// Belief initialization from the first observation: per particle, draw an
/// initial hidden state, a uniform random action, a latent from the encoder,
/// advance the recurrent state, and weight against the first observation.
#[allow(clippy::too_many_arguments)]
pub fn init_belief<R: Rng>(
    tape: &mut Tape,
    model: &GenerativeModel,
    encoder: &Encoder,
    params: &ParameterSet,
    k: usize,
    obs: &[f64],
    mask: &[f64],
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<(BeliefFilter, StepWeights)> {
    let mut particles = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    let o_enc = model.encode_obs(tape, params, obs, mask)?;
    for _ in 0..k {
        let h0 = model.sample_h0(tape, params, rng);
        let action = [rng.gen::<f64>(), rng.gen::<f64>()];
        let a_enc = model.encode_action(tape, params, &action)?;
        let (qm, qv) = encoder.encode_posterior(tape, params, h0, a_enc, o_enc)?;
        let noise = gaussian::standard_normal_vec(model.z_dim, rng);
        let z = tape.reparam(qm, qv, &noise)?;
        let logw =
            particle_log_weight(tape, model, params, z, h0, a_enc, obs, mask, qm, qv, diag)?;
        let h = model.rnn_next(tape, params, h0, z, a_enc, o_enc)?;
        particles.push(Particle { h, z, logw });
        weights.push(logw);
    }
    let values: Vec<f64> = weights.iter().map(|&w| tape.scalar(w)).collect();
    let factor = logsumexp(&values) - (k as f64).ln();
    Ok((
        BeliefFilter {
            particles,
            step_factor: factor,
            log_evidence: factor,
        },
        weights,
    ))
}

/// The four-step mutation-selection update: resample ancestors, propose a
/// latent from the encoder, advance the recurrent state, reweight.
#[allow(clippy::too_many_arguments)]
pub fn update_belief<R: Rng>(
    tape: &mut Tape,
    filter: &BeliefFilter,
    model: &GenerativeModel,
    encoder: &Encoder,
    params: &ParameterSet,
    action: &[f64],
    obs: &[f64],
    mask: &[f64],
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<(BeliefFilter, StepWeights)> {
    let k = filter.k();
    let prev_weights = filter.log_weight_values(tape);
    let ancestors = resample_ancestors(&prev_weights, rng, diag);
    let a_enc = model.encode_action(tape, params, action)?;
    let o_enc = model.encode_obs(tape, params, obs, mask)?;
    let mut particles = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for &anc in &ancestors {
        let h_prev = filter.particles[anc].h;
        let (qm, qv) = encoder.encode_posterior(tape, params, h_prev, a_enc, o_enc)?;
        let noise = gaussian::standard_normal_vec(model.z_dim, rng);
        let z = tape.reparam(qm, qv, &noise)?;
        let logw =
            particle_log_weight(tape, model, params, z, h_prev, a_enc, obs, mask, qm, qv, diag)?;
        let h = model.rnn_next(tape, params, h_prev, z, a_enc, o_enc)?;
        particles.push(Particle { h, z, logw });
        weights.push(logw);
    }
    let values: Vec<f64> = weights.iter().map(|&w| tape.scalar(w)).collect();
    let factor = logsumexp(&values) - (k as f64).ln();
    Ok((
        BeliefFilter {
            particles,
            step_factor: factor,
            log_evidence: filter.log_evidence + factor,
        },
        weights,
    ))
}
