use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {what}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite {
        what: String,
        iteration: Option<u64>,
    },

    #[error("row {row} is not on the probability simplex (sum {sum}, min {min})")]
    NotSimplex { row: usize, sum: f64, min: f64 },

    #[error("row {row} is not a one-hot vector")]
    NotOneHot { row: usize },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("invalid overlap scheme: {0}")]
    InvalidScheme(String),

    #[error("unknown overlap scheme {0:?}; expected \"10to5\" or \"7to3\"")]
    UnknownScheme(String),

    #[error("unknown ablation axis {0:?}")]
    UnknownAxis(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
