//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulation and optimization layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Matrix, vector, or pulse dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The transfer-function frequency grid does not cover the spectral
    /// support of the pulse it is asked to distort.
    #[error("transfer grid too narrow: {0}")]
    TransferGrid(String),

    /// An optimization run hit a non-finite fidelity or gradient.
    #[error("optimization aborted: {0}")]
    Aborted(String),

    /// Malformed text input (pulse files, transfer CSV, config fragments).
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
