//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error(
        "failed to converge after {iterations} iterations (last max change {last_change:.3e})"
    )]
    Convergence { iterations: usize, last_change: f64 },

    #[error("separation detected: coefficients diverging while gradient remains large")]
    Separation,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("unsupported sampling design: {0}")]
    Design(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}
