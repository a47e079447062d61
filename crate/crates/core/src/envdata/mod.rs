//! Synthetic POMDP environments, scripted behavior policies, offline dataset
//! generation, preprocessing, and the trajectory file format.

pub mod dataset;
pub mod preprocess;
pub mod sim;
pub mod toy;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, Dataset, DatasetHeader, NormStat, Trajectory,
    Transition, VariableInfo, VariableKind, SCHEMA_VERSION,
};
pub use preprocess::{
    compute_norm_stats, interpolate_for_mdp, mask_variables, normalize_and_dilate,
    observed_means, variable_selection_order, ACTION_DILATION_EXPONENT,
};
pub use sim::{
    oracle_action, BehaviorPolicy, Hidden, SepsisSim, SepsisSimConfig, Terminal, N_ACTION_DIMS,
};
pub use toy::{exact_filter, TigerLikeToy, N_STATES};
