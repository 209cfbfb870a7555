use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("matrix is not positive definite (jitter escalated to {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("gradient requested for a non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("{rows} observation rows exceed the exact-GP cap of {cap}")]
    CapExceeded { rows: usize, cap: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("minibatch is empty")]
    EmptyBatch,
    #[error("unknown batch kind: {0}")]
    UnknownBatchKind(String),
    #[error("point lies outside the box of {function}")]
    OutOfBox { function: String },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("dataset has unobserved partial derivatives")]
    MissingGradients,
    #[error("invalid subspace dimension k={k} for D={dim}")]
    InvalidK { k: usize, dim: usize },
    #[error("unknown test function `{0}`")]
    UnknownFunction(String),
    #[error("numerical failure at epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } => true,
            Error::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
