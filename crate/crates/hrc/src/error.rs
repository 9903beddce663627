//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or sequence shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Malformed or non-finite input data.
    #[error("data error: {0}")]
    Data(String),

    /// An API contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Operation requires state (e.g. trained parameters) that is missing.
    #[error("state error: {0}")]
    State(String),

    /// No pending action chunk covers the requested tick.
    #[error("scheduling error: {0}")]
    Scheduling(String),

    /// Attention mask forbids every key for some query.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// A metric is undefined on the given stream (e.g. empty).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Task instruction is empty or unusable.
    #[error("invalid instruction: {0}")]
    InvalidInstruction(String),

    /// Configuration file problem (unknown key, bad value, hash mismatch).
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Numerical failure (NaN/Inf reached an invariant boundary).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// The impedance loop received a non-finite force and stopped.
    #[error("safety stop: {0}")]
    SafetyStop(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable process exit code for the CLI: 0 success, 1 validation,
    /// 2 IO, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Numeric(_) | Error::SafetyStop(_) => 3,
            _ => 1,
        }
    }
}
