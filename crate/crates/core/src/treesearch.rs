//! Parallel best-first suffix-tree search over belief states.
//!
//! Each tree grows from the current belief by repeatedly expanding the leaf
//! whose discounted path likelihood back to the root is largest. An expansion
//! simulates successor beliefs for a sampled subspace of actions, scores each
//! action with the heuristic value Ψ, samples one action from a softmax over
//! the Ψ values, and keeps only that action's children. After a fixed number
//! of expansions the tree is collapsed bottom-up with Bellman backups and the
//! root values of the parallel trees are averaged into the value target.
//!
//! Gradients never flow out of a search: every simulation runs on throwaway
//! tapes and the caller's filter is only read through detached snapshots.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::ActorCritic;
use crate::belief::{logsumexp, AggregationNet, BeliefFilter, FilterState};
use crate::config::SearchConfig;
use crate::diffcore::{ParameterSet, Tape};
use crate::error::Result;
use crate::genmodel::{Diagnostics, Encoder, GenerativeModel, MdpCvae, LOG_WEIGHT_FLOOR};

/// Below this log-η the children of an action carry no usable likelihood mass
/// and the convex combination degrades to a uniform average.
const ETA_LOG_FLOOR: f64 = -700.0;

/// Simulation side of the search. The tree itself never touches model
/// internals; it asks the backend for successor states, belief vectors,
/// values, and policy proposals.
pub trait SearchBackend: Sync {
    type State: Clone + Send + Sync;

    /// Belief vector of a state, used for V_κ and π.
    fn belief(&self, state: &Self::State) -> Result<Vec<f64>>;

    /// Exactly `n_z * n_zo` simulated successors under `action`, each paired
    /// with the log mean particle weight of its belief update.
    fn simulate_children(
        &self,
        state: &Self::State,
        action: [f64; 2],
        n_z: usize,
        n_zo: usize,
        rng: &mut ChaCha8Rng,
        diag: &mut Diagnostics,
    ) -> Result<Vec<(Self::State, f64)>>;

    /// V_κ(b).
    fn value(&self, belief: &[f64]) -> Result<f64>;

    /// One draw from π(·|b), clipped to the unit action box.
    fn policy_sample(&self, belief: &[f64], rng: &mut ChaCha8Rng) -> Result<[f64; 2]>;
}

#[derive(Debug, Clone)]
pub struct TreeNode<S> {
    pub state: S,
    pub belief: Vec<f64>,
    /// V_κ(b): leaf value, also the fallback for unexpanded children.
    pub leaf_value: f64,
    pub depth: usize,
    /// log of the η-normalized one-step likelihood of the edge from the
    /// parent; 0 at the root.
    pub stepfactor: f64,
    /// log of γ^depth times the product of normalized step factors from the
    /// root; 0 at the root.
    pub pathscore: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub selected_action: Option<[f64; 2]>,
    /// v_T after backup; `None` on leaves (their v_T is `leaf_value`).
    pub backed_up: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Tree<S> {
    pub nodes: Vec<TreeNode<S>>,
    /// Current leaf set in creation order.
    pub leaves: Vec<usize>,
}

impl<S> Tree<S> {
    pub fn node_value(&self, i: usize) -> f64 {
        self.nodes[i].backed_up.unwrap_or(self.nodes[i].leaf_value)
    }

    /// One line per node: id, depth, pathscore, value, selected action.
    pub fn trace(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let act = n
                .selected_action
                .map(|a| format!("[{:.4} {:.4}]", a[0], a[1]))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "node {i} depth {} pathscore {:+.6e} value {:+.6e} action {act}\n",
                n.depth,
                n.pathscore,
                self.node_value(i),
            ));
        }
        out
    }
}

/// n_a − 1 draws from the current policy plus one uniform draw for coverage.
pub fn sample_action_subspace<B: SearchBackend>(
    backend: &B,
    belief: &[f64],
    n_actions: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 2]>> {
    assert!(n_actions >= 2, "action subspace needs the uniform draw plus at least one policy draw");
    let mut actions = Vec::with_capacity(n_actions);
    for _ in 0..n_actions - 1 {
        actions.push(backend.policy_sample(belief, rng)?);
    }
    actions.push([rng.gen::<f64>(), rng.gen::<f64>()]);
    Ok(actions)
}

/// η-normalized log weights for one action's children. When the total mass is
/// at the floor the weights fall back to uniform and the event is counted.
fn normalize_log_weights(log_meanweights: &[f64], diag: &mut Diagnostics) -> Vec<f64> {
    let log_eta = logsumexp(log_meanweights);
    if !log_eta.is_finite() || log_eta <= ETA_LOG_FLOOR {
        diag.eta_floor_hits += 1;
        let n = log_meanweights.len() as f64;
        return vec![-n.ln(); log_meanweights.len()];
    }
    log_meanweights.iter().map(|&w| w - log_eta).collect()
}

/// Ψ(b, a) = R(b, a) + (γ/η)·Σ meanweight·V_κ(child), with the convex
/// combination computed from log weights.
pub fn heuristic_value(
    reward: f64,
    log_meanweights: &[f64],
    child_values: &[f64],
    gamma: f64,
    diag: &mut Diagnostics,
) -> f64 {
    assert_eq!(log_meanweights.len(), child_values.len());
    let normalized = normalize_log_weights(log_meanweights, diag);
    let avg: f64 = normalized
        .iter()
        .zip(child_values)
        .map(|(&lw, &v)| lw.exp() * v)
        .sum();
    reward + gamma * avg
}

/// Softmax probabilities over the candidate Ψ values at temperature β.
pub fn tree_policy_probs(psi: &[f64], beta: f64) -> Vec<f64> {
    assert!(beta > 0.0);
    let scaled: Vec<f64> = psi.iter().map(|&p| p / beta).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// One draw from the tree policy π̂ ∝ exp(Ψ/β) over the sampled candidates.
pub fn tree_policy_sample<R: Rng>(psi: &[f64], beta: f64, rng: &mut R) -> usize {
    let probs = tree_policy_probs(psi, beta);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The largest discounted path likelihood back to the root, ties broken by
/// creation order.
pub fn select_best_leaf<S>(tree: &Tree<S>) -> usize {
    let mut best = tree.leaves[0];
    for &leaf in &tree.leaves[1..] {
        if tree.nodes[leaf].pathscore > tree.nodes[best].pathscore {
            best = leaf;
        }
    }
    best
}

/// Expands `leaf` with an explicit candidate set: simulate children for every
/// candidate, score each action with Ψ, sample the tree action, keep only its
/// children. Simulated intermediate rewards are identically zero. Returns the
/// Ψ value of each candidate.
pub fn expand_with_candidates<B: SearchBackend>(
    tree: &mut Tree<B::State>,
    leaf: usize,
    backend: &B,
    candidates: &[[f64; 2]],
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
    diag: &mut Diagnostics,
) -> Result<Vec<f64>> {
    assert!(tree.nodes[leaf].children.is_empty(), "only leaves expand");
    let mut per_action = Vec::with_capacity(candidates.len());
    let mut psi = Vec::with_capacity(candidates.len());
    for &action in candidates {
        let children = backend.simulate_children(
            &tree.nodes[leaf].state,
            action,
            cfg.n_z,
            cfg.n_zo,
            rng,
            diag,
        )?;
        assert_eq!(children.len(), cfg.n_z * cfg.n_zo);
        let mut beliefs = Vec::with_capacity(children.len());
        let mut values = Vec::with_capacity(children.len());
        let mut log_mw = Vec::with_capacity(children.len());
        for (state, lmw) in &children {
            let b = backend.belief(state)?;
            values.push(backend.value(&b)?);
            beliefs.push(b);
            log_mw.push(lmw.max(LOG_WEIGHT_FLOOR));
        }
        psi.push(heuristic_value(0.0, &log_mw, &values, cfg.gamma, diag));
        per_action.push((children, beliefs, values, log_mw));
    }
    let chosen = tree_policy_sample(&psi, cfg.beta, rng);
    let (children, beliefs, values, log_mw) = per_action.swap_remove(chosen);
    let normalized = normalize_log_weights(&log_mw, diag);
    let parent_score = tree.nodes[leaf].pathscore;
    let depth = tree.nodes[leaf].depth + 1;
    tree.nodes[leaf].selected_action = Some(candidates[chosen]);
    tree.leaves.retain(|&l| l != leaf);
    for (((state, _), belief), (&value, &step)) in children
        .into_iter()
        .zip(beliefs)
        .zip(values.iter().zip(&normalized))
    {
        let id = tree.nodes.len();
        tree.nodes.push(TreeNode {
            state,
            belief,
            leaf_value: value,
            depth,
            stepfactor: step,
            pathscore: parent_score + cfg.gamma.ln() + step,
            parent: Some(leaf),
            children: Vec::new(),
            selected_action: None,
            backed_up: None,
        });
        tree.nodes[leaf].children.push(id);
        tree.leaves.push(id);
    }
    Ok(psi)
}

/// Expansion with the candidate subspace sampled from the current policy.
pub fn expand_node<B: SearchBackend>(
    tree: &mut Tree<B::State>,
    leaf: usize,
    backend: &B,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
    diag: &mut Diagnostics,
) -> Result<Vec<f64>> {
    let candidates =
        sample_action_subspace(backend, &tree.nodes[leaf].belief.clone(), cfg.n_actions, rng)?;
    expand_with_candidates(tree, leaf, backend, &candidates, cfg, rng, diag)
}

/// Bottom-up Bellman collapse: from the deepest expanded nodes to the root,
/// v_T = (γ/η)·Σ meanweight·v(child), children falling back to V_κ when
/// unexpanded. Returns the root value.
pub fn backup<S>(tree: &mut Tree<S>, gamma: f64) -> f64 {
    let mut order: Vec<usize> = (0..tree.nodes.len())
        .filter(|&i| !tree.nodes[i].children.is_empty())
        .collect();
    order.sort_by(|&a, &b| tree.nodes[b].depth.cmp(&tree.nodes[a].depth));
    for i in order {
        let avg: f64 = tree.nodes[i]
            .children
            .iter()
            .map(|&c| tree.nodes[c].stepfactor.exp() * tree.node_value(c))
            .sum();
        tree.nodes[i].backed_up = Some(gamma * avg);
    }
    tree.node_value(0)
}

/// Grows one tree from `root` with `cfg.n_expansions` best-first expansions
/// and collapses it. Returns the tree and its root value v_T.
pub fn build_tree<B: SearchBackend>(
    backend: &B,
    root: B::State,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
    diag: &mut Diagnostics,
) -> Result<(Tree<B::State>, f64)> {
    let belief = backend.belief(&root)?;
    let leaf_value = backend.value(&belief)?;
    let mut tree = Tree {
        nodes: vec![TreeNode {
            state: root,
            belief,
            leaf_value,
            depth: 0,
            stepfactor: 0.0,
            pathscore: 0.0,
            parent: None,
            children: Vec::new(),
            selected_action: None,
            backed_up: None,
        }],
        leaves: vec![0],
    };
    for _ in 0..cfg.n_expansions {
        let leaf = select_best_leaf(&tree);
        expand_node(&mut tree, leaf, backend, cfg, rng, diag)?;
    }
    let v = backup(&mut tree, cfg.gamma);
    Ok((tree, v))
}

const SEED_MIX: u64 = 0x9e3779b97f4a7c15;

/// The value target: the ordered mean of `cfg.n_trees` independent root
/// values. Trees run in parallel on cloned states with private seeded
/// streams, so the result is bit-stable across schedulers.
pub fn evaluate_belief<B: SearchBackend>(
    backend: &B,
    root: &B::State,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(f64, Diagnostics)> {
    let results: Vec<Result<(f64, Diagnostics)>> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ SEED_MIX.wrapping_mul(i as u64 + 1));
            let mut diag = Diagnostics::default();
            let (_, v) = build_tree(backend, root.clone(), cfg, &mut rng, &mut diag)?;
            Ok((v, diag))
        })
        .collect();
    let mut sum = 0.0;
    let mut diag = Diagnostics::default();
    for r in results {
        let (v, d) = r?;
        sum += v;
        diag.merge(&d);
    }
    Ok((sum / cfg.n_trees as f64, diag))
}

/// Search backend for the sequential Monte Carlo generative model: states are
/// detached filter snapshots, children come from prior-latent rollouts of the
/// observation model followed by a full filter update.
pub struct PomdpBackend<'a> {
    pub model: &'a GenerativeModel,
    pub encoder: &'a Encoder,
    pub aggregation: &'a AggregationNet,
    pub heads: &'a ActorCritic,
    pub params: &'a ParameterSet,
}

fn sample_weighted_index(log_weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let k = log_weights.len();
    if log_weights.iter().all(|&w| w <= LOG_WEIGHT_FLOOR) {
        return rng.gen_range(0..k);
    }
    let norm = logsumexp(log_weights);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in log_weights.iter().enumerate() {
        acc += (w - norm).exp();
        if u < acc {
            return i;
        }
    }
    k - 1
}

impl<'a> SearchBackend for PomdpBackend<'a> {
    type State = FilterState;

    fn belief(&self, state: &FilterState) -> Result<Vec<f64>> {
        let mut tape = Tape::new(false);
        let filter = BeliefFilter::restore(&mut tape, state);
        let b = self.aggregation.aggregate(&mut tape, self.params, &filter, None)?;
        Ok(tape.value(b).to_vec())
    }

    fn simulate_children(
        &self,
        state: &FilterState,
        action: [f64; 2],
        n_z: usize,
        n_zo: usize,
        rng: &mut ChaCha8Rng,
        diag: &mut Diagnostics,
    ) -> Result<Vec<(FilterState, f64)>> {
        let mut out = Vec::with_capacity(n_z * n_zo);
        for _ in 0..n_z {
            let anc = sample_weighted_index(&state.log_weights, rng);
            let h = &state.h[anc];
            // Latent from the transition prior under the candidate action.
            let z = {
                let mut tape = Tape::new(false);
                let hn = tape.constant(h.clone());
                let a_enc = self.model.encode_action(&mut tape, self.params, &action)?;
                let (pm, pv) = self.model.transition_prior(&mut tape, self.params, hn, a_enc)?;
                let noise = crate::diffcore::gaussian::standard_normal_vec(self.model.z_dim, rng);
                tape.value(pm)
                    .iter()
                    .zip(tape.value(pv))
                    .zip(noise)
                    .map(|((&m, &v), n)| m + v.sqrt() * n)
                    .collect::<Vec<f64>>()
            };
            for _ in 0..n_zo {
                let (obs, mask) =
                    self.model
                        .simulate_observation(self.params, &z, h, &action, rng)?;
                let mut tape = Tape::new(false);
                let filter = BeliefFilter::restore(&mut tape, state);
                let (next, _) = crate::belief::update_belief(
                    &mut tape,
                    &filter,
                    self.model,
                    self.encoder,
                    self.params,
                    &action,
                    &obs,
                    &mask,
                    rng,
                    diag,
                )?;
                let lmw = next.step_factor;
                out.push((next.snapshot(&tape), lmw));
            }
        }
        Ok(out)
    }

    fn value(&self, belief: &[f64]) -> Result<f64> {
        let mut tape = Tape::new(false);
        let b = tape.constant(belief.to_vec());
        let v = self.heads.value(&mut tape, self.params, b)?;
        Ok(tape.scalar(v))
    }

    fn policy_sample(&self, belief: &[f64], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let mut tape = Tape::new(false);
        let b = tape.constant(belief.to_vec());
        self.heads.sample_action(&mut tape, self.params, b, rng)
    }
}

/// Search backend for the dense-observation baseline: states are raw
/// observations, successors come from the conditional decoder, and every
/// child carries unit mean weight.
pub struct MdpBackend<'a> {
    pub cvae: &'a MdpCvae,
    pub heads: &'a ActorCritic,
    pub params: &'a ParameterSet,
}

impl<'a> SearchBackend for MdpBackend<'a> {
    type State = Vec<f64>;

    fn belief(&self, state: &Vec<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(false);
        let b = self.cvae.belief(&mut tape, self.params, state)?;
        Ok(tape.value(b).to_vec())
    }

    fn simulate_children(
        &self,
        state: &Vec<f64>,
        action: [f64; 2],
        n_z: usize,
        n_zo: usize,
        rng: &mut ChaCha8Rng,
        _diag: &mut Diagnostics,
    ) -> Result<Vec<(Vec<f64>, f64)>> {
        let mut out = Vec::with_capacity(n_z * n_zo);
        for _ in 0..n_z * n_zo {
            let obs = self
                .cvae
                .simulate_observation(self.params, state, &action, rng)?;
            out.push((obs, 0.0));
        }
        Ok(out)
    }

    fn value(&self, belief: &[f64]) -> Result<f64> {
        let mut tape = Tape::new(false);
        let b = tape.constant(belief.to_vec());
        let v = self.heads.value(&mut tape, self.params, b)?;
        Ok(tape.scalar(v))
    }

    fn policy_sample(&self, belief: &[f64], rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let mut tape = Tape::new(false);
        let b = tape.constant(belief.to_vec());
        self.heads.sample_action(&mut tape, self.params, b, rng)
    }
}
