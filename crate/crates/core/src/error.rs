use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("non-finite value in input `{0}`")]
    NonFiniteInput(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("node {node} ({op}) is not differentiable")]
    NotDifferentiable { node: usize, op: &'static str },

    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("non-finite function value at coordinate {coord}")]
    NonFiniteFunction { coord: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown transform `{0}`")]
    UnknownTransform(String),

    #[error("magnitude {magnitude} outside [{lo}, {hi}] for {transform}")]
    MagnitudeOutOfRange {
        transform: &'static str,
        magnitude: f64,
        lo: f64,
        hi: f64,
    },

    #[error("malformed data at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("record {record}: label {label} out of range")]
    BadLabel { record: usize, label: u8 },

    #[error("config error: {0}")]
    Config(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
