//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the predictive coding engine.
#[derive(Debug, Error)]
pub enum GpcError {
    /// Tensor shapes do not conform to the requested operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// backward() was called on a tensor that is not a taped scalar.
    #[error("backward requires a taped scalar root, got shape {0}")]
    NonScalarRoot(String),

    /// CSV ingestion failure with row/column context.
    #[error("csv error at row {row}, column {column}: {reason}")]
    Csv {
        row: usize,
        column: usize,
        reason: String,
    },

    /// A sequence turned out empty where samples were required.
    #[error("empty sequence")]
    EmptySequence,

    #[error("stride prior has no admissible candidates")]
    EmptyCandidates,

    /// Policy enumeration would exceed the explosion guard.
    #[error("policy enumeration of {count} policies exceeds limit {limit}")]
    EnumerationExplosion { count: u128, limit: u128 },

    #[error("empty action set")]
    EmptyActionSet,

    #[error("empty policy list")]
    EmptyPolicyList,

    #[error("horizon must cover at least one step and the whole action sequence")]
    InvalidHorizon,

    #[error("level {level} out of range for {what}")]
    LevelOutOfRange { level: usize, what: &'static str },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GpcError>;

/// Shorthand constructor for [`GpcError::InvalidConfig`].
pub fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> GpcError {
    GpcError::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl GpcError {
    /// Shorthand constructor for [`GpcError::Io`] carrying the path.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GpcError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
