//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer dimensions disagree. Carries the offending node or
    /// operation label so training failures are attributable.
    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value at `{node}`: {detail}")]
    NonFinite { node: String, detail: String },

    /// Graph used out of protocol (backward before forward, double
    /// backward without re-forward, non-scalar loss, unbound input).
    #[error("graph protocol violation: {0}")]
    GraphProtocol(String),

    /// Training loss diverged.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// A selector's soft coverage collapsed to ~0 for one class.
    #[error(
        "selector collapsed for class {class} (soft coverage {zeta:.3e} after warmup); \
         consider decreasing lambda_s"
    )]
    SelectorCollapse { class: usize, zeta: f64 },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset construction or validation failure.
    #[error("invalid data: {0}")]
    Data(String),

    /// CSV parse/validation failure, located by row and column.
    #[error("csv error at row {row}, column `{column}`: {detail}")]
    Csv {
        row: usize,
        column: String,
        detail: String,
    },

    /// A required artifact (checkpoint, model dir, data file) is absent.
    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    /// Bad CLI argument (unknown sample id, malformed value).
    #[error("bad argument: {0}")]
    BadArgument(String),

    /// Metric preconditions violated (e.g. single-class AUROC input).
    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
