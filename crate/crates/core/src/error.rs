//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not a descent direction: directional derivative {0} is not negative")]
    NotDescentDirection(f64),

    #[error("line search failed: {0}")]
    LineSearchFailed(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid transition: {0}")]
    InvalidTransition(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
