use std::io;

use thiserror::Error;

/// Errors produced by the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("step index {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid world: {0}")]
    World(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("prompt {0:?} matches no component of the world")]
    EmptyComponentSet(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("invalid guidance config: {0}")]
    Guidance(String),

    #[error("non-finite value at sampling step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("backend failure at sampling step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("judge error: {0}")]
    Judge(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("remote judge network failure: {0}")]
    Network(String),

    #[error("remote judge timed out: {0}")]
    Timeout(String),

    #[error("remote judge returned HTTP status {0}")]
    HttpStatus(u16),

    #[error("remote judge response violates schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
