//! The offline training loops: the full tree-search variant, the A2C-style
//! variant without trees, and the dense-observation baseline.
//!
//! All three walk shuffled episodes concatenated across epochs, accumulate
//! the loss over mini-batches of `batch_len` decision steps, and take one
//! RMSProp step per batch. Episode boundaries re-initialize the belief and
//! close the advantage recursion; batch boundaries inside an episode carry
//! the belief forward through a detached snapshot and pre-accumulate the
//! advantage tail with a gradient-free rollout over the episode's remainder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{
    accumulate_tail, advantage_infinite, advantage_with_next_value, five_term_loss,
    policy_logprob_and_entropy, truncated_ratios, ActorCritic, BehaviorHead, StepTerms,
};
use crate::belief::{init_belief, update_belief, AggregationNet, BeliefFilter, FilterState};
use crate::config::{AdvantageConfig, Config};
use crate::diffcore::{checkpoint, clip_and_step, GradStore, OptimizerState, ParameterSet, Tape};
use crate::envdata::{Dataset, Terminal, Trajectory};
use crate::error::{CoreError, Result};
use crate::genmodel::{Diagnostics, Encoder, GenerativeModel, MdpCvae};
use crate::oppe::{wis_return, BehaviorMode, MdpReplayer, Replayer, WeightedReturn};
use crate::treesearch::{evaluate_belief, MdpBackend, PomdpBackend};

const SEED_MIX: u64 = 0x9e3779b97f4a7c15;
const SHUFFLE_SALT: u64 = 0x517cc1b727220a95;
const TREE_SALT: u64 = 0x2545f4914f6cdd1d;
const EVAL_SALT: u64 = 0xd6e8feb86659fd93;

/// Every network of the sequential Monte Carlo agent, over one parameter set.
pub struct AehsStack {
    pub params: ParameterSet,
    pub model: GenerativeModel,
    pub encoder: Encoder,
    pub aggregation: AggregationNet,
    pub heads: ActorCritic,
    pub behavior: BehaviorHead,
    pub n_particles: usize,
}

impl AehsStack {
    pub fn new(cfg: &Config, seed: u64) -> Self {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = GenerativeModel::new(&mut params, &mut rng, &cfg.model);
        let encoder = Encoder::new(&mut params, &mut rng, &cfg.model);
        let aggregation = AggregationNet::new(&mut params, &mut rng, &cfg.model);
        let heads = ActorCritic::new(&mut params, &mut rng, &cfg.model);
        let behavior = BehaviorHead::new(&mut params, &mut rng, &cfg.model);
        Self {
            params,
            model,
            encoder,
            aggregation,
            heads,
            behavior,
            n_particles: cfg.model.n_particles,
        }
    }

    pub fn replayer(&self) -> Replayer<'_> {
        Replayer {
            model: &self.model,
            encoder: &self.encoder,
            aggregation: &self.aggregation,
            heads: &self.heads,
            params: &self.params,
            n_particles: self.n_particles,
        }
    }
}

/// The dense-observation baseline agent.
pub struct MdpStack {
    pub params: ParameterSet,
    pub cvae: MdpCvae,
    pub heads: ActorCritic,
    pub behavior: BehaviorHead,
}

impl MdpStack {
    pub fn new(cfg: &Config, seed: u64) -> Self {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cvae = MdpCvae::new(&mut params, &mut rng, &cfg.model);
        let heads = ActorCritic::new(&mut params, &mut rng, &cfg.model);
        let behavior = BehaviorHead::new(&mut params, &mut rng, &cfg.model);
        Self { params, cvae, heads, behavior }
    }
}

/// One emitted learning-curve row. The validation score is present only on
/// iterations where validation ran.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: usize,
    pub elbo: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub behavior_loss: f64,
    pub oppe_score: Option<f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub metrics: Vec<MetricsRow>,
    pub iterations: usize,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchStats {
    n_steps: usize,
    elbo: f64,
    value_loss: f64,
    policy_loss: f64,
    entropy: f64,
    behavior_loss: f64,
}

impl BatchStats {
    fn merge(&mut self, o: &BatchStats) {
        let (a, b) = (self.n_steps as f64, o.n_steps as f64);
        if a + b == 0.0 {
            return;
        }
        let t = a + b;
        self.elbo = (self.elbo * a + o.elbo * b) / t;
        self.value_loss = (self.value_loss * a + o.value_loss * b) / t;
        self.policy_loss = (self.policy_loss * a + o.policy_loss * b) / t;
        self.entropy = (self.entropy * a + o.entropy * b) / t;
        self.behavior_loss = (self.behavior_loss * a + o.behavior_loss * b) / t;
        self.n_steps += o.n_steps;
    }
}

/// Decision-step buffers accumulated while a batch is built. Each contiguous
/// run of steps from one episode forms a segment; only the last segment of a
/// batch can be cut before its terminal.
#[derive(Default)]
struct StepBuffer {
    steps: Vec<StepTerms>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    ratios: Vec<(f64, f64)>,
    tree_targets: Vec<f64>,
    segment_starts: Vec<usize>,
    /// terminal flag per closed segment, aligned with `segment_starts`
    segment_terminal: Vec<bool>,
}

impl StepBuffer {
    fn open_segment(&mut self) {
        self.segment_starts.push(self.steps.len());
        self.segment_terminal.push(false);
    }

    fn close_segment(&mut self) {
        *self.segment_terminal.last_mut().unwrap() = true;
    }

    /// Advantages over all segments; `boundary` supplies (V(b_{t+L}), tail)
    /// for a final segment cut before its terminal.
    fn advantages(&self, boundary: Option<(f64, f64)>, cfg: &AdvantageConfig) -> Result<Vec<f64>> {
        let mut adv = Vec::with_capacity(self.steps.len());
        for (i, &start) in self.segment_starts.iter().enumerate() {
            let end = self
                .segment_starts
                .get(i + 1)
                .copied()
                .unwrap_or(self.steps.len());
            if start == end {
                continue;
            }
            let seg = if self.segment_terminal[i] {
                advantage_infinite(
                    &self.rewards[start..end],
                    &self.values[start..end],
                    &self.ratios[start..end],
                    cfg,
                )?
            } else {
                let (next_value, tail) = boundary.ok_or(CoreError::MissingTerminal)?;
                advantage_with_next_value(
                    &self.rewards[start..end],
                    &self.values[start..end],
                    next_value,
                    &self.ratios[start..end],
                    tail,
                    cfg,
                )?
            };
            adv.extend(seg);
        }
        Ok(adv)
    }
}

fn component_stats(tape: &Tape, buf: &StepBuffer, adv: &[f64], targets: &[f64], elbo: f64) -> BatchStats {
    let l = buf.steps.len() as f64;
    let mut s = BatchStats { n_steps: buf.steps.len(), elbo, ..Default::default() };
    for (i, st) in buf.steps.iter().enumerate() {
        s.policy_loss -= adv[i] * tape.scalar(st.log_pi) / l;
        s.value_loss += (tape.scalar(st.value) - targets[i]).powi(2) / l;
        s.entropy += tape.scalar(st.entropy) / l;
        s.behavior_loss -= tape.scalar(st.log_mu) / l;
    }
    s
}

fn scalar_elbo(tape: &Tape, step_weights: &[Vec<crate::diffcore::NodeId>]) -> f64 {
    if step_weights.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for sw in step_weights {
        let vals: Vec<f64> = sw.iter().map(|&w| tape.scalar(w)).collect();
        total += crate::belief::logsumexp(&vals) - (vals.len() as f64).ln();
    }
    -total / step_weights.len() as f64
}

/// Per-worker cursor over its share of the shuffled episode stream.
struct PomdpWorker {
    order: Vec<usize>,
    pos: usize,
    /// next record within the current episode; 0 means the episode still
    /// needs its belief initialization
    step: usize,
    filter: Option<FilterState>,
    rng: ChaCha8Rng,
}

impl PomdpWorker {
    fn new(episodes: &[usize], epochs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
        let mut order = Vec::with_capacity(episodes.len() * epochs);
        for _ in 0..epochs {
            let mut epoch: Vec<usize> = episodes.to_vec();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        Self {
            order,
            pos: 0,
            step: 0,
            filter: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

struct BatchOutput {
    grads: GradStore,
    stats: BatchStats,
}

#[allow(clippy::too_many_arguments)]
fn run_pomdp_batch(
    stack: &AehsStack,
    data: &Dataset,
    cfg: &Config,
    worker: &mut PomdpWorker,
    use_trees: bool,
    diag: &mut Diagnostics,
) -> Result<Option<BatchOutput>> {
    let mut tape = Tape::new(true);
    let mut buf = StepBuffer::default();
    let mut step_weights = Vec::new();
    let mut filter: Option<BeliefFilter> = worker
        .filter
        .take()
        .map(|s| BeliefFilter::restore(&mut tape, &s));
    if filter.is_some() {
        buf.open_segment();
    }
    let mut boundary: Option<(f64, f64)> = None;
    while buf.steps.len() < cfg.train.batch_len {
        if filter.is_none() {
            let Some(&ep_idx) = worker.order.get(worker.pos) else { break };
            let first = &data.trajectories[ep_idx].steps[0];
            let (f, w) = init_belief(
                &mut tape,
                &stack.model,
                &stack.encoder,
                &stack.params,
                stack.n_particles,
                &first.obs,
                &first.mask,
                &mut worker.rng,
                diag,
            )?;
            step_weights.push(w);
            filter = Some(f);
            worker.step = 1;
            buf.open_segment();
        }
        let ep = &data.trajectories[worker.order[worker.pos]];
        let record = &ep.steps[worker.step];
        let f = filter.as_ref().unwrap();
        let mut order: Vec<usize> = (0..f.k()).collect();
        order.shuffle(&mut worker.rng);
        let belief =
            stack
                .aggregation
                .aggregate(&mut tape, &stack.params, f, Some(&order))?;
        let value = stack.heads.value(&mut tape, &stack.params, belief)?;
        let (log_pi, entropy) = policy_logprob_and_entropy(
            &mut tape,
            &stack.params,
            &stack.heads,
            belief,
            &record.action,
        )?;
        let log_mu = stack
            .behavior
            .log_prob(&mut tape, &stack.params, belief, &record.action)?;
        buf.ratios.push(truncated_ratios(
            tape.scalar(log_pi),
            tape.scalar(log_mu),
            &cfg.advantage,
        ));
        buf.values.push(tape.scalar(value));
        buf.rewards.push(record.reward);
        buf.steps.push(StepTerms { log_pi, entropy, value, log_mu });
        if use_trees {
            let root = f.snapshot(&tape);
            let backend = PomdpBackend {
                model: &stack.model,
                encoder: &stack.encoder,
                aggregation: &stack.aggregation,
                heads: &stack.heads,
                params: &stack.params,
            };
            let tree_seed = TREE_SALT
                ^ SEED_MIX.wrapping_mul(worker.rng.next_u64_fork());
            let (v, tdiag) = evaluate_belief(&backend, &root, &cfg.search, tree_seed)?;
            diag.merge(&tdiag);
            buf.tree_targets.push(v);
        }
        if record.terminal != Terminal::None {
            buf.close_segment();
            filter = None;
            worker.pos += 1;
            worker.step = 0;
        } else {
            let (next, w) = update_belief(
                &mut tape,
                filter.as_ref().unwrap(),
                &stack.model,
                &stack.encoder,
                &stack.params,
                &record.action,
                &record.obs,
                &record.mask,
                &mut worker.rng,
                diag,
            )?;
            step_weights.push(w);
            filter = Some(next);
            worker.step += 1;
        }
    }
    if buf.steps.is_empty() {
        return Ok(None);
    }
    if let Some(f) = filter {
        let state = f.snapshot(&tape);
        let ep = &data.trajectories[worker.order[worker.pos]];
        boundary = Some(pomdp_tail(stack, cfg, ep, worker.step, &state, &mut worker.rng, diag)?);
        worker.filter = Some(state);
    }
    let adv = buf.advantages(boundary, &cfg.advantage)?;
    let targets: Vec<f64> = if use_trees {
        buf.tree_targets.clone()
    } else {
        buf.values.iter().zip(&adv).map(|(v, a)| v + a).collect()
    };
    let loss = five_term_loss(
        &mut tape,
        &buf.steps,
        &adv,
        &targets,
        &step_weights,
        &cfg.loss_weights,
        diag,
    )?;
    let mut grads = GradStore::zeros_like(&stack.params);
    tape.backward(loss, &stack.params, &mut grads)?;
    let stats = component_stats(&tape, &buf, &adv, &targets, scalar_elbo(&tape, &step_weights));
    Ok(Some(BatchOutput { grads, stats }))
}

trait ForkSeed {
    fn next_u64_fork(&mut self) -> u64;
}

impl ForkSeed for ChaCha8Rng {
    fn next_u64_fork(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}

/// Gradient-free rollout over the rest of the current episode, producing the
/// bootstrap value V(b_{t+L}) and the pre-accumulated advantage tail.
#[allow(clippy::too_many_arguments)]
fn pomdp_tail(
    stack: &AehsStack,
    cfg: &Config,
    ep: &Trajectory,
    start: usize,
    state: &FilterState,
    rng: &mut ChaCha8Rng,
    diag: &mut Diagnostics,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new(false);
    let mut filter = BeliefFilter::restore(&mut tape, state);
    let mut values = Vec::new();
    let mut rewards = Vec::new();
    let mut rhos = Vec::new();
    let mut cs = Vec::new();
    for record in &ep.steps[start..] {
        let belief = stack
            .aggregation
            .aggregate(&mut tape, &stack.params, &filter, None)?;
        let v = stack.heads.value(&mut tape, &stack.params, belief)?;
        let (log_pi, _) = policy_logprob_and_entropy(
            &mut tape,
            &stack.params,
            &stack.heads,
            belief,
            &record.action,
        )?;
        let log_mu = stack
            .behavior
            .log_prob(&mut tape, &stack.params, belief, &record.action)?;
        let (rho, c) = truncated_ratios(tape.scalar(log_pi), tape.scalar(log_mu), &cfg.advantage);
        values.push(tape.scalar(v));
        rewards.push(record.reward);
        rhos.push(rho);
        cs.push(c);
        if record.terminal != Terminal::None {
            break;
        }
        let (next, _) = update_belief(
            &mut tape,
            &filter,
            &stack.model,
            &stack.encoder,
            &stack.params,
            &record.action,
            &record.obs,
            &record.mask,
            rng,
            diag,
        )?;
        filter = next;
    }
    let m = values.len();
    let deltas: Vec<f64> = (0..m)
        .map(|i| {
            if i + 1 == m {
                rhos[i] * (rewards[i] - values[i])
            } else {
                rhos[i] * (rewards[i] + cfg.advantage.gamma * values[i + 1] - values[i])
            }
        })
        .collect();
    Ok((values[0], accumulate_tail(&deltas, &cs, cfg.advantage.gamma)))
}

fn validate_pomdp(stack: &AehsStack, val: &Dataset, cfg: &Config, seed: u64) -> Result<f64> {
    let rep = stack.replayer();
    let results: Vec<Option<WeightedReturn>> = val
        .trajectories
        .par_iter()
        .map(|ep| {
            let mut d = Diagnostics::default();
            rep.trajectory_log_weight(
                ep,
                BehaviorMode::Learned(&stack.behavior),
                seed ^ EVAL_SALT ^ SEED_MIX.wrapping_mul(ep.episode_id + 1),
                &mut d,
            )
            .ok()
            .flatten()
            .map(|lw| WeightedReturn {
                log_weight: lw,
                empirical_return: ep.empirical_return(),
            })
        })
        .collect();
    let evals: Vec<WeightedReturn> = results.into_iter().flatten().collect();
    wis_return(&evals, &cfg.oppe)
}

fn startup_checks(data: &Dataset, obs_dim: usize) -> Result<()> {
    data.validate()?;
    if data.header.obs_dim() != obs_dim {
        return Err(CoreError::SchemaMismatch(format!(
            "model expects {obs_dim} variables, dataset has {}",
            data.header.obs_dim()
        )));
    }
    Ok(())
}

fn maybe_checkpoint(
    dir: Option<&Path>,
    every: usize,
    iteration: usize,
    params: &ParameterSet,
    opt: &OptimizerState,
) -> Result<()> {
    if let Some(dir) = dir {
        if every > 0 && iteration % every == 0 {
            checkpoint::save(&dir.join(format!("checkpoint-{iteration:06}.bin")), params, Some(opt))?;
        }
    }
    Ok(())
}

/// Algorithm-faithful training with per-step tree evaluation (single
/// worker, one optimizer step per batch).
pub fn train_aehs(
    stack: &mut AehsStack,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &Config,
    seed: u64,
    ckpt_dir: Option<&Path>,
) -> Result<TrainResult> {
    startup_checks(data, stack.model.obs_dim)?;
    train_pomdp_loop(stack, data, val, cfg, seed, ckpt_dir, true, 1)
}

/// The no-tree variant: `cfg.search.n_trees` synchronous workers on episode
/// shards, advantages serving as both the policy and the value signal.
pub fn train_ae_a2c(
    stack: &mut AehsStack,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &Config,
    seed: u64,
    ckpt_dir: Option<&Path>,
) -> Result<TrainResult> {
    startup_checks(data, stack.model.obs_dim)?;
    train_pomdp_loop(stack, data, val, cfg, seed, ckpt_dir, false, cfg.search.n_trees.max(1))
}

#[allow(clippy::too_many_arguments)]
fn train_pomdp_loop(
    stack: &mut AehsStack,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &Config,
    seed: u64,
    ckpt_dir: Option<&Path>,
    use_trees: bool,
    n_workers: usize,
) -> Result<TrainResult> {
    let shards = shard_episodes(data.trajectories.len(), n_workers);
    let mut workers: Vec<PomdpWorker> = shards
        .iter()
        .enumerate()
        .map(|(i, s)| PomdpWorker::new(s, cfg.train.epochs, seed ^ SEED_MIX.wrapping_mul(i as u64 + 1)))
        .collect();
    let mut opt = OptimizerState::new(&stack.params, cfg.train.learning_rate, cfg.train.rmsprop_eps);
    let mut metrics = Vec::new();
    let mut diag = Diagnostics::default();
    let mut iteration = 0usize;
    loop {
        let outputs: Vec<Result<Option<(BatchOutput, Diagnostics)>>> = workers
            .par_iter_mut()
            .map(|w| {
                let mut d = Diagnostics::default();
                Ok(run_pomdp_batch(stack, data, cfg, w, use_trees, &mut d)?.map(|b| (b, d)))
            })
            .collect();
        let mut grads = GradStore::zeros_like(&stack.params);
        let mut stats = BatchStats::default();
        let mut active = 0usize;
        for out in outputs {
            if let Some((batch, d)) = out? {
                grads.accumulate(&batch.grads);
                stats.merge(&batch.stats);
                diag.merge(&d);
                active += 1;
            }
        }
        if active == 0 {
            break;
        }
        if active > 1 {
            for g in grads.grads.iter_mut() {
                for x in g.iter_mut() {
                    *x /= active as f64;
                }
            }
        }
        clip_and_step(&mut stack.params, &grads, &mut opt, cfg.train.max_grad_norm)?;
        iteration += 1;
        let oppe_score = match val {
            Some(v) if cfg.train.eval_every > 0 && iteration % cfg.train.eval_every == 0 => {
                Some(validate_pomdp(stack, v, cfg, seed)?)
            }
            _ => None,
        };
        metrics.push(MetricsRow {
            iteration,
            elbo: stats.elbo,
            value_loss: stats.value_loss,
            policy_loss: stats.policy_loss,
            entropy: stats.entropy,
            behavior_loss: stats.behavior_loss,
            oppe_score,
        });
        maybe_checkpoint(ckpt_dir, cfg.train.checkpoint_every, iteration, &stack.params, &opt)?;
    }
    if let Some(dir) = ckpt_dir {
        checkpoint::save(&dir.join("checkpoint-final.bin"), &stack.params, Some(&opt))?;
    }
    Ok(TrainResult { metrics, iterations: iteration, diagnostics: diag })
}

/// Round-robin episode split: shard sizes differ by at most one and episodes
/// are never broken across workers.
fn shard_episodes(n_episodes: usize, n_workers: usize) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); n_workers];
    for e in 0..n_episodes {
        shards[e % n_workers].push(e);
    }
    shards
}

// --- dense-observation baseline ---

struct MdpWorker {
    order: Vec<usize>,
    pos: usize,
    step: usize,
    obs_prev: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

fn run_mdp_batch(
    stack: &MdpStack,
    data: &Dataset,
    cfg: &Config,
    worker: &mut MdpWorker,
    diag: &mut Diagnostics,
) -> Result<Option<BatchOutput>> {
    let mut tape = Tape::new(true);
    let mut buf = StepBuffer::default();
    let mut model_terms = Vec::new();
    if worker.obs_prev.is_some() {
        buf.open_segment();
    }
    let mut boundary = None;
    while buf.steps.len() < cfg.train.batch_len {
        if worker.obs_prev.is_none() {
            let Some(&ep_idx) = worker.order.get(worker.pos) else { break };
            let first = &data.trajectories[ep_idx].steps[0];
            model_terms.push(stack.cvae.init_loss(&mut tape, &stack.params, &first.obs)?);
            worker.obs_prev = Some(first.obs.clone());
            worker.step = 1;
            buf.open_segment();
        }
        let ep = &data.trajectories[worker.order[worker.pos]];
        let record = &ep.steps[worker.step];
        let obs_prev = worker.obs_prev.clone().unwrap();
        let belief = stack.cvae.belief(&mut tape, &stack.params, &obs_prev)?;
        let value = stack.heads.value(&mut tape, &stack.params, belief)?;
        let (log_pi, entropy) = policy_logprob_and_entropy(
            &mut tape,
            &stack.params,
            &stack.heads,
            belief,
            &record.action,
        )?;
        let log_mu = stack
            .behavior
            .log_prob(&mut tape, &stack.params, belief, &record.action)?;
        buf.ratios.push(truncated_ratios(
            tape.scalar(log_pi),
            tape.scalar(log_mu),
            &cfg.advantage,
        ));
        buf.values.push(tape.scalar(value));
        buf.rewards.push(record.reward);
        buf.steps.push(StepTerms { log_pi, entropy, value, log_mu });
        model_terms.push(stack.cvae.step_loss(
            &mut tape,
            &stack.params,
            &obs_prev,
            &record.action,
            &record.obs,
            None,
            &mut worker.rng,
        )?);
        let backend = MdpBackend {
            cvae: &stack.cvae,
            heads: &stack.heads,
            params: &stack.params,
        };
        let tree_seed = TREE_SALT ^ SEED_MIX.wrapping_mul(worker.rng.next_u64_fork());
        let (v, tdiag) = evaluate_belief(&backend, &obs_prev, &cfg.search, tree_seed)?;
        diag.merge(&tdiag);
        buf.tree_targets.push(v);
        if record.terminal != Terminal::None {
            buf.close_segment();
            worker.obs_prev = None;
            worker.pos += 1;
            worker.step = 0;
        } else {
            worker.obs_prev = Some(record.obs.clone());
            worker.step += 1;
        }
    }
    if buf.steps.is_empty() {
        return Ok(None);
    }
    if let Some(obs) = worker.obs_prev.clone() {
        let ep = &data.trajectories[worker.order[worker.pos]];
        boundary = Some(mdp_tail(stack, cfg, ep, worker.step, &obs)?);
    }
    let adv = buf.advantages(boundary, &cfg.advantage)?;
    let targets = buf.tree_targets.clone();
    let trunk = five_term_loss(
        &mut tape,
        &buf.steps,
        &adv,
        &targets,
        &[],
        &cfg.loss_weights,
        diag,
    )?;
    let inv = 1.0 / model_terms.len() as f64;
    let mut terms: Vec<(f64, crate::diffcore::NodeId)> =
        vec![(1.0, trunk)];
    let mut model_loss = 0.0;
    for &t in &model_terms {
        terms.push((cfg.loss_weights.elbo * inv, t));
        model_loss += tape.scalar(t) * inv;
    }
    let loss = tape.affine(&terms, 0.0);
    if !tape.scalar(loss).is_finite() {
        return Err(CoreError::NonFiniteLoss);
    }
    let mut grads = GradStore::zeros_like(&stack.params);
    tape.backward(loss, &stack.params, &mut grads)?;
    let stats = component_stats(&tape, &buf, &adv, &targets, model_loss);
    Ok(Some(BatchOutput { grads, stats }))
}

fn mdp_tail(
    stack: &MdpStack,
    cfg: &Config,
    ep: &Trajectory,
    start: usize,
    obs_start: &[f64],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new(false);
    let mut obs_prev = obs_start.to_vec();
    let mut values = Vec::new();
    let mut rewards = Vec::new();
    let mut rhos = Vec::new();
    let mut cs = Vec::new();
    for record in &ep.steps[start..] {
        let belief = stack.cvae.belief(&mut tape, &stack.params, &obs_prev)?;
        let v = stack.heads.value(&mut tape, &stack.params, belief)?;
        let (log_pi, _) = policy_logprob_and_entropy(
            &mut tape,
            &stack.params,
            &stack.heads,
            belief,
            &record.action,
        )?;
        let log_mu = stack
            .behavior
            .log_prob(&mut tape, &stack.params, belief, &record.action)?;
        let (rho, c) = truncated_ratios(tape.scalar(log_pi), tape.scalar(log_mu), &cfg.advantage);
        values.push(tape.scalar(v));
        rewards.push(record.reward);
        rhos.push(rho);
        cs.push(c);
        if record.terminal != Terminal::None {
            break;
        }
        obs_prev = record.obs.clone();
    }
    let m = values.len();
    let deltas: Vec<f64> = (0..m)
        .map(|i| {
            if i + 1 == m {
                rhos[i] * (rewards[i] - values[i])
            } else {
                rhos[i] * (rewards[i] + cfg.advantage.gamma * values[i + 1] - values[i])
            }
        })
        .collect();
    Ok((values[0], accumulate_tail(&deltas, &cs, cfg.advantage.gamma)))
}

fn validate_mdp(stack: &MdpStack, val: &Dataset, cfg: &Config) -> Result<f64> {
    let rep = MdpReplayer {
        cvae: &stack.cvae,
        heads: &stack.heads,
        behavior: &stack.behavior,
        params: &stack.params,
    };
    let results: Vec<Option<WeightedReturn>> = val
        .trajectories
        .par_iter()
        .map(|ep| {
            let mut d = Diagnostics::default();
            rep.trajectory_log_weight(ep, true, &mut d)
                .ok()
                .flatten()
                .map(|lw| WeightedReturn {
                    log_weight: lw,
                    empirical_return: ep.empirical_return(),
                })
        })
        .collect();
    let evals: Vec<WeightedReturn> = results.into_iter().flatten().collect();
    wis_return(&evals, &cfg.oppe)
}

/// The baseline loop over interpolation-densified data: same batch structure
/// and tree loop, with the conditional auto-encoder in place of the filter.
pub fn train_mdp_baseline(
    stack: &mut MdpStack,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &Config,
    seed: u64,
    ckpt_dir: Option<&Path>,
) -> Result<TrainResult> {
    startup_checks(data, stack.cvae.obs_dim)?;
    let mut worker = MdpWorker {
        order: {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
            let mut order = Vec::new();
            for _ in 0..cfg.train.epochs {
                let mut epoch: Vec<usize> = (0..data.trajectories.len()).collect();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            order
        },
        pos: 0,
        step: 0,
        obs_prev: None,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut opt = OptimizerState::new(&stack.params, cfg.train.learning_rate, cfg.train.rmsprop_eps);
    let mut metrics = Vec::new();
    let mut diag = Diagnostics::default();
    let mut iteration = 0usize;
    while let Some(batch) = run_mdp_batch(stack, data, cfg, &mut worker, &mut diag)? {
        clip_and_step(&mut stack.params, &batch.grads, &mut opt, cfg.train.max_grad_norm)?;
        iteration += 1;
        let oppe_score = match val {
            Some(v) if cfg.train.eval_every > 0 && iteration % cfg.train.eval_every == 0 => {
                Some(validate_mdp(stack, v, cfg)?)
            }
            _ => None,
        };
        metrics.push(MetricsRow {
            iteration,
            elbo: batch.stats.elbo,
            value_loss: batch.stats.value_loss,
            policy_loss: batch.stats.policy_loss,
            entropy: batch.stats.entropy,
            behavior_loss: batch.stats.behavior_loss,
            oppe_score,
        });
        maybe_checkpoint(ckpt_dir, cfg.train.checkpoint_every, iteration, &stack.params, &opt)?;
    }
    if let Some(dir) = ckpt_dir {
        checkpoint::save(&dir.join("checkpoint-final.bin"), &stack.params, Some(&opt))?;
    }
    Ok(TrainResult { metrics, iterations: iteration, diagnostics: diag })
}

/// Standalone OPPE pass over a dataset, shared by training validation and the
/// evaluation command.
pub fn evaluate_pomdp_oppe(
    stack: &AehsStack,
    data: &Dataset,
    cfg: &Config,
    seed: u64,
    learned_behavior: bool,
) -> Result<Vec<WeightedReturn>> {
    let rep = stack.replayer();
    let results: Vec<Option<WeightedReturn>> = data
        .trajectories
        .par_iter()
        .map(|ep| {
            let mut d = Diagnostics::default();
            let mode = if learned_behavior {
                BehaviorMode::Learned(&stack.behavior)
            } else {
                BehaviorMode::Oracle
            };
            rep.trajectory_log_weight(
                ep,
                mode,
                seed ^ EVAL_SALT ^ SEED_MIX.wrapping_mul(ep.episode_id + 1),
                &mut d,
            )
            .ok()
            .flatten()
            .map(|lw| WeightedReturn {
                log_weight: lw,
                empirical_return: ep.empirical_return(),
            })
        })
        .collect();
    let evals: Vec<WeightedReturn> = results.into_iter().flatten().collect();
    if evals.is_empty() {
        return Err(CoreError::DegenerateWeights);
    }
    let _ = cfg;
    Ok(evals)
}

/// Standalone OPPE pass for the baseline model.
pub fn evaluate_mdp_oppe(
    stack: &MdpStack,
    data: &Dataset,
    learned_behavior: bool,
) -> Result<Vec<WeightedReturn>> {
    let rep = MdpReplayer {
        cvae: &stack.cvae,
        heads: &stack.heads,
        behavior: &stack.behavior,
        params: &stack.params,
    };
    let results: Vec<Option<WeightedReturn>> = data
        .trajectories
        .par_iter()
        .map(|ep| {
            let mut d = Diagnostics::default();
            rep.trajectory_log_weight(ep, learned_behavior, &mut d)
                .ok()
                .flatten()
                .map(|lw| WeightedReturn {
                    log_weight: lw,
                    empirical_return: ep.empirical_return(),
                })
        })
        .collect();
    let evals: Vec<WeightedReturn> = results.into_iter().flatten().collect();
    if evals.is_empty() {
        return Err(CoreError::DegenerateWeights);
    }
    Ok(evals)
}
