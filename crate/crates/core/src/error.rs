//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its admissible range.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The requested design cannot be realised with at least one patient
    /// per arm and stage.
    #[error("infeasible design: {0}")]
    InfeasibleDesign(String),

    /// A numeric vector does not decode to a valid design point.
    #[error("decode error: {0}")]
    Decode(String),

    /// Gaussian-process fitting failed even after jitter escalation.
    #[error("surrogate fit failed: {0}")]
    Fit(String),

    /// Configuration file could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
