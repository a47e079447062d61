use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("nonpositive variance encountered: {0}")]
    NonPositiveVariance(f64),

    #[error("loss must be a scalar, got length {0}")]
    NonScalarLoss(usize),

    #[error("non-finite gradient in parameter `{0}`; training step aborted")]
    NonFiniteGradient(String),

    #[error("non-finite loss; training step aborted")]
    NonFiniteLoss,

    #[error("all particle weights at the underflow floor")]
    DegenerateWeights,

    #[error("empty dataset or no usable trajectories")]
    EmptyDataset,

    #[error("trajectory has no terminal step")]
    MissingTerminal,

    #[error("unknown variable id {0}")]
    UnknownVariable(usize),

    #[error("dataset schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
