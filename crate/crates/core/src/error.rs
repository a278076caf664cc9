//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// Configuration problems and numeric failures are kept as distinct variants
/// so the CLI can map them to its documented exit codes (2 and 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("backward called without a cached forward pass")]
    MissingForwardCache,

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite parameter in layer {layer} after optimizer step")]
    NonFiniteParameter { layer: usize },

    #[error("non-finite probability ratio at batch step {step}")]
    NonFiniteRatio { step: usize },

    #[error("illegal action {action} for agent {agent}")]
    IllegalAction { agent: usize, action: usize },

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no paired rollouts available; collect paired evaluation episodes before updating the mask")]
    NoPairedRollouts,

    #[error("distribution support sizes differ: {p} vs {q}")]
    MismatchedSupport { p: usize, q: usize },

    #[error("distribution does not sum to 1 (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("at least {required} needed, got {got}: {what}")]
    TooFew {
        what: &'static str,
        required: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that should be rejected before any file is written.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    /// True for mid-run numeric failures (non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. }
                | Error::NonFiniteParameter { .. }
                | Error::NonFiniteRatio { .. }
        )
    }
}
