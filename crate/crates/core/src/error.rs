use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("trajectory of request `{request}` references unknown tool `{tool}`")]
    UnknownTool { request: String, tool: String },

    #[error("tool catalog is empty")]
    EmptyCatalog,

    #[error("dataset failed validation ({} violation(s)); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),

    #[error("remote endpoint unavailable: {0}")]
    RemoteUnavailable(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("batch item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("prompt does not match the expected template: {0}")]
    BadTemplate(String),

    #[error("target token `{0}` is not in the model vocabulary")]
    UnknownTargetToken(String),

    #[error("no positive candidate edges (nothing masked)")]
    NoPositives,

    #[error("no negative candidate edges (graph is complete)")]
    NoNegatives,

    #[error("checkpoint rejected: {0}")]
    VersionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
