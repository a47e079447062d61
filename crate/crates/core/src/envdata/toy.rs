//! Two-state hidden-Markov toy with known matrices. Serves as the exact
//! filtering oracle that the particle filter is checked against.

use crate::error::{CoreError, Result};
use rand::Rng;

pub const N_STATES: usize = 2;

#[derive(Debug, Clone)]
pub struct TigerLikeToy {
    /// transition[a][s][s'] for the two discrete-surrogate actions
    pub transition: [[[f64; N_STATES]; N_STATES]; 2],
    /// observation[s][o] over `n_obs` discrete symbols
    pub observation: Vec<[f64; N_STATES]>,
    pub prior: [f64; N_STATES],
}

impl TigerLikeToy {
    pub fn new(
        transition: [[[f64; N_STATES]; N_STATES]; 2],
        obs_columns: Vec<[f64; N_STATES]>,
        prior: [f64; N_STATES],
    ) -> Result<Self> {
        for t in &transition {
            for row in t {
                check_simplex(row)?;
            }
        }
        for s in 0..N_STATES {
            let total: f64 = obs_columns.iter().map(|c| c[s]).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(CoreError::Config(format!(
                    "observation probabilities for state {s} sum to {total}"
                )));
            }
        }
        check_simplex(&prior)?;
        Ok(Self {
            transition,
            observation: obs_columns,
            prior,
        })
    }

    /// Listening-vs-acting flavor: action 0 keeps the state and observes it
    /// noisily; action 1 stirs the state and observes nothing useful.
    pub fn default_toy() -> Self {
        Self::new(
            [
                [[0.95, 0.05], [0.05, 0.95]],
                [[0.6, 0.4], [0.3, 0.7]],
            ],
            vec![[0.85, 0.15], [0.15, 0.85]],
            [0.5, 0.5],
        )
        .expect("valid default toy")
    }

    pub fn n_obs(&self) -> usize {
        self.observation.len()
    }

    /// Continuous embedding of the two discrete-surrogate actions in [0,1]².
    pub fn embed_action(a: usize) -> [f64; 2] {
        if a == 0 {
            [0.2, 0.2]
        } else {
            [0.8, 0.8]
        }
    }

    pub fn sample_episode<R: Rng>(
        &self,
        len: usize,
        rng: &mut R,
    ) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut s = usize::from(rng.gen::<f64>() > self.prior[0]);
        let mut states = Vec::with_capacity(len);
        let mut actions = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        for _ in 0..len {
            let a = usize::from(rng.gen_bool(0.5));
            s = sample_row(&self.transition[a][s], rng);
            let o = sample_categorical(
                &self.observation.iter().map(|c| c[s]).collect::<Vec<_>>(),
                rng,
            );
            states.push(s);
            actions.push(a);
            obs.push(o);
        }
        (states, actions, obs)
    }
}

fn check_simplex(row: &[f64; N_STATES]) -> Result<()> {
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p))
        || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CoreError::Config(format!("row {row:?} is not a distribution")));
    }
    Ok(())
}

fn sample_row<R: Rng>(row: &[f64; N_STATES], rng: &mut R) -> usize {
    usize::from(rng.gen::<f64>() >= row[0])
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Exact Bayes filter over the two states. Returns the posterior after each
/// (action, observation) pair, starting from the toy's prior.
pub fn exact_filter(
    toy: &TigerLikeToy,
    actions: &[usize],
    observations: &[usize],
) -> Result<Vec<[f64; N_STATES]>> {
    if actions.len() != observations.len() {
        return Err(CoreError::Config(
            "action and observation sequences differ in length".into(),
        ));
    }
    let mut belief = toy.prior;
    let mut out = Vec::with_capacity(actions.len());
    for (&a, &o) in actions.iter().zip(observations) {
        if a >= 2 || o >= toy.n_obs() {
            return Err(CoreError::Config(format!("invalid symbol a={a} o={o}")));
        }
        let mut next = [0.0; N_STATES];
        for (sp, n) in next.iter_mut().enumerate() {
            let predicted: f64 = (0..N_STATES)
                .map(|s| belief[s] * toy.transition[a][s][sp])
                .sum();
            *n = predicted * toy.observation[o][sp];
        }
        let z: f64 = next.iter().sum();
        if z <= 0.0 {
            return Err(CoreError::DegenerateWeights);
        }
        for n in next.iter_mut() {
            *n /= z;
        }
        belief = next;
        out.push(belief);
    }
    Ok(out)
}
