//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration problems
//! exit with code 2, numerical aborts with 3, and IO/format/data problems
//! with 4 (see `main.rs`).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch; indicates a wiring bug.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or flag combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset content violates a contract (label range, counts, missing
    /// foreground masks, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not conform to its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint/config disagreement or corrupted artifacts.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced a non-finite loss; carries enough context to locate
    /// the failing step.
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (sup={loss_sup}, con={loss_con}, kl={loss_kl})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss_sup: f64,
        loss_con: f64,
        loss_kl: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("invalid JSON: {e}"))
    }
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            Error::Io(_) | Error::Format(_) | Error::Data(_) | Error::Integrity(_) => 4,
            Error::Shape(_) => 1,
        }
    }
}
