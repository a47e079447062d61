//! Offline reinforcement learning for partially observed decision processes:
//! a sequential variational generative model with particle-filter belief
//! states, best-first suffix-tree planning, an off-policy actor-critic, and
//! weighted-importance-sampling policy evaluation.

pub mod agent;
pub mod belief;
pub mod config;
pub mod diffcore;
pub mod envdata;
pub mod error;
pub mod genmodel;
pub mod oppe;
pub mod treesearch;

pub use config::Config;
pub use error::{CoreError, Result};
