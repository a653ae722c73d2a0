//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KgError>;

#[derive(Debug, Error)]
pub enum KgError {
    /// A data file failed to parse; carries the file and 1-based line.
    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    /// A symbol or id was not found in a frozen vocabulary or store.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Tensor or matrix shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation produced a non-finite value.
    #[error("numeric error in {op}: non-finite output")]
    NonFinite { op: &'static str },

    /// An internal invariant or caller contract was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A model constraint (e.g. unit hyperplane normal) was violated.
    #[error("constraint error: {0}")]
    Constraint(String),

    /// An entity cannot be encoded (unseen, no attributes, strict mode).
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Negative sampling ran out of candidate replacements.
    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),

    /// Configuration file failed validation; carries the field path.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Wire-protocol violation, with the protocol error code.
    #[error("protocol error 0x{code:02x}: {message}")]
    Protocol { code: u8, message: String },

    /// Checkpoint magic or version mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss.
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}{}",
        suspect
            .as_ref()
            .map(|s| format!(" (max-gradient key: {s})"))
            .unwrap_or_default()
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        suspect: Option<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KgError {
    pub fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        KgError::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        KgError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
