//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A record in a line-delimited file could not be decoded.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate conversation id `{0}`")]
    DuplicateId(String),

    /// A parameter or configuration value is outside its domain.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no precomputed embedding for key `{0}`")]
    MissingEmbedding(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    /// A quantity that is mathematically undefined for the given inputs.
    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}: {1}")]
    Context(String, Box<Error>),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    /// Wrap the error with the name of the module or command that raised it.
    pub fn context(self, ctx: impl Into<String>) -> Self {
        Error::Context(ctx.into(), Box::new(self))
    }

    /// True for errors caused by bad input or configuration rather than by
    /// the environment or a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::DuplicateId(_)
            | Error::Invalid { .. }
            | Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::NonFinite(_)
            | Error::Insufficient(_) => true,
            Error::Context(_, inner) => inner.is_validation(),
            _ => false,
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
