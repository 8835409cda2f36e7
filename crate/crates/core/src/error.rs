use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("program parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-differentiable point at node {node} ({op})")]
    Nondifferentiable { node: usize, op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite sample produced at flow layer {layer}")]
    NonFiniteSample { layer: usize },

    #[error("inverse unavailable: layer {layer} ({kind}) has no closed-form inverse")]
    InverseUnavailable { layer: usize, kind: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("family `{0}` has no tractable density")]
    Intractable(String),

    #[error("non-finite loss at iteration {iteration} (eta index {eta_index:?})")]
    NumericFailure { iteration: u64, eta_index: Option<usize> },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
