//! Differentiable-function substrate: tape-based reverse-mode gradients,
//! dense and recurrent layers, Gaussian heads, RMSProp, and checkpoints.

pub mod checkpoint;
pub mod findiff;
pub mod gaussian;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gaussian::{gaussian_entropy, gaussian_log_density, reparam_sample, GaussianParams};
pub use init::orthogonal_init;
pub use layers::{Activation, Dense, GaussianHead, GruCell, Mlp, VAR_FLOOR};
pub use optim::{clip_and_step, clip_gradients, OptimizerState};
pub use params::{GradStore, ParamId, ParameterSet};
pub use tape::{NodeId, Tape};
pub use tensor::TensorValue;
