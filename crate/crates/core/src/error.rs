use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("duplicate write to {0} (write-once protocol violated)")]
    DuplicateWrite(String),

    #[error("deadlock: timed out after {timeout_ms} ms waiting for {key}")]
    Deadlock { key: String, timeout_ms: u64 },

    #[error("decode aborted after {tokens_emitted} tokens: {reason}")]
    DecodeAborted { reason: String, tokens_emitted: usize, partial: Vec<usize> },

    #[error("descent bound precondition failed: alpha {alpha} <= rho*gamma {rho_gamma}")]
    BoundViolated { alpha: f64, rho_gamma: f64 },

    #[error("no active error tokens in batch; alignment cannot be estimated")]
    EmptyEstimate,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(
        "vocabulary mismatch: model {index} has V={found}, expected V={expected}; \
         chained models must share one tokenizer for layer-wise residual correction"
    )]
    VocabMismatch { index: usize, expected: usize, found: usize },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn deadlock(key: &impl std::fmt::Display, timeout_ms: u64) -> Self {
        Error::Deadlock { key: key.to_string(), timeout_ms }
    }
}
