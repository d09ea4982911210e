use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("masked cross-entropy has no labelled positions")]
    EmptyLoss,

    #[error("sequence {0} is fully masked")]
    FullyMasked(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every tensor that requires a gradient")]
    Detached,

    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("token id {id} out of range (limit {limit})")]
    TokenOutOfRange { id: usize, limit: usize },

    #[error("step {step} out of range 0..={steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("incompatible runs: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
