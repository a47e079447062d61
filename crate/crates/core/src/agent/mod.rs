//! Actor-critic heads, off-policy advantage estimation, the five-term loss,
//! and the training loops.

pub mod advantage;
pub mod heads;
pub mod loss;
pub mod trainer;

pub use advantage::{
    accumulate_tail, advantage_infinite, advantage_with_next_value, truncated_ratios,
};
pub use heads::{gaussian_entropy_node, policy_logprob_and_entropy, ActorCritic, BehaviorHead};
pub use loss::{five_term_loss, StepTerms};
