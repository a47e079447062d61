//! Offline trajectory datasets: in-memory types, generation from a simulator
//! plus behavior policy, and the line-delimited on-disk format (one JSON
//! header line with schema and normalization statistics, then one JSON
//! transition record per line).

use super::sim::{BehaviorPolicy, SepsisSim, Terminal};
use crate::error::{CoreError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableInfo {
    pub name: String,
    pub kind: VariableKind,
}

/// Per-variable min/max recorded from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStat {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub variables: Vec<VariableInfo>,
    pub normalization: Option<Vec<NormStat>>,
    /// set once observations have been min-max scaled
    pub normalized: bool,
    /// set once actions have been dilated with a^0.3
    pub actions_dilated: bool,
}

impl DatasetHeader {
    pub fn new(variables: Vec<VariableInfo>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            variables,
            normalization: None,
            normalized: false,
            actions_dilated: false,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.variables.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode_id: u64,
    pub t: usize,
    pub obs: Vec<f64>,
    pub mask: Vec<f64>,
    pub action: [f64; 2],
    pub reward: f64,
    pub terminal: Terminal,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub behavior_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub steps: Vec<Transition>,
}

impl Trajectory {
    /// Undiscounted empirical return; with the sparse-reward contract this is
    /// just the terminal reward.
    pub fn empirical_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.obs.len() != obs_dim || s.mask.len() != obs_dim {
                return Err(CoreError::SchemaMismatch(format!(
                    "episode {}: expected {obs_dim} variables, got {}",
                    self.episode_id,
                    s.obs.len()
                )));
            }
            let last = i + 1 == self.steps.len();
            if s.terminal.is_terminal() != last {
                return Err(CoreError::MissingTerminal);
            }
            if !s.terminal.is_terminal() && s.reward != 0.0 {
                return Err(CoreError::Config(format!(
                    "episode {}: nonzero reward on non-terminal step",
                    self.episode_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let d = self.header.obs_dim();
        for t in &self.trajectories {
            t.validate(d)?;
        }
        Ok(())
    }

    pub fn mean_return(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().map(|t| t.empirical_return()).sum::<f64>() / n
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }
}

/// Rolls out `n_episodes` under the behavior policy. Episode e uses its own
/// seeded stream derived from `seed`, so the dataset is reproducible and
/// insensitive to generation order; ids start at `id_offset`.
pub fn generate_dataset(
    sim: &SepsisSim,
    policy: &BehaviorPolicy,
    n_episodes: usize,
    id_offset: u64,
    seed: u64,
) -> Dataset {
    let trajectories = (0..n_episodes)
        .map(|e| {
            let episode_id = id_offset + e as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(episode_id + 1)));
            generate_episode(sim, policy, episode_id, &mut rng)
        })
        .collect();
    Dataset {
        header: DatasetHeader::new(sim.schema()),
        trajectories,
    }
}

fn generate_episode<R: Rng>(
    sim: &SepsisSim,
    policy: &BehaviorPolicy,
    episode_id: u64,
    rng: &mut R,
) -> Trajectory {
    let (mut hidden, obs0, mask0) = sim.reset(rng);
    let mut steps = vec![Transition {
        episode_id,
        t: 0,
        obs: obs0,
        mask: mask0,
        // the time-0 record carries no decision; the first action is at t=1
        action: [0.0, 0.0],
        reward: 0.0,
        terminal: Terminal::None,
        behavior_logprob: None,
    }];
    loop {
        let (action, logprob) = policy.act(&hidden, rng);
        let (h2, obs, mask, reward, terminal) = sim.step(&hidden, action, rng);
        let t = steps.len();
        steps.push(Transition {
            episode_id,
            t,
            obs,
            mask,
            action,
            reward,
            terminal,
            behavior_logprob: Some(logprob),
        });
        if terminal.is_terminal() {
            break;
        }
        hidden = h2;
    }
    Trajectory { episode_id, steps }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&dataset.header)
        .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
    writeln!(w, "{header}")?;
    for traj in &dataset.trajectories {
        for step in &traj.steps {
            let line = serde_json::to_string(step)
                .map_err(|e| CoreError::Io(std::io::Error::other(e)))?;
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or(CoreError::EmptyDataset)??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| CoreError::Config(format!("bad dataset header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Config(format!(
            "unsupported trajectory schema version {}",
            header.schema_version
        )));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step: Transition = serde_json::from_str(&line)
            .map_err(|e| CoreError::Config(format!("bad transition record: {e}")))?;
        match trajectories.last_mut() {
            Some(t) if t.episode_id == step.episode_id => t.steps.push(step),
            _ => trajectories.push(Trajectory {
                episode_id: step.episode_id,
                steps: vec![step],
            }),
        }
    }
    let ds = Dataset {
        header,
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}
