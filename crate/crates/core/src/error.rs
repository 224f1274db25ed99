use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got rank {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: invalid geometry: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {what} at coordinate {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation failed at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("checkpoint version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("tensor `{name}` shape mismatch: expected {expected:?} ({expected_len} values), found {found:?} ({found_len} values)")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        expected_len: usize,
        found: Vec<usize>,
        found_len: usize,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: non-finite gradient for parameter `{param}`")]
    GradientDivergence { step: usize, param: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
