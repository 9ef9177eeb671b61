use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("division by zero: `{0}` must be nonzero")]
    DivisionByZero(&'static str),

    #[error("numerical overflow at step {step}: {detail}")]
    NumericalOverflow { step: usize, detail: String },

    #[error("path {path}: {source}")]
    InPath {
        path: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sweep iteration {iteration}: {source}")]
    InIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("constraint violated for `{key}`: {message}")]
    Constraint { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn constraint(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Constraint { key: key.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that originate in floating point breakdown rather
    /// than bad configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NumericalOverflow { .. } => true,
            Error::InPath { source, .. } | Error::InIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} is not finite ({v})")))
    }
}
