use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("numerical instability at step {step}: {reason}; try a smaller dt")]
    NumericalInstability { step: usize, reason: String },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("time grids differ between ensemble members (member {index})")]
    GridMismatch { index: usize },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{aborted} of {total} trajectories aborted (more than 1%); first failure: {first}")]
    TooManyAborts {
        aborted: usize,
        total: usize,
        first: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: malformed output file: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

/// Configuration errors carry the offending key and, when it came from a
/// source line, the 1-based line number.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { key: String, line: usize },

    #[error("line {line}: cannot parse value of `{key}`: {reason}")]
    InvalidValue {
        key: String,
        line: usize,
        reason: String,
    },

    #[error("{}`{key}` violates a requirement: {reason}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invariant {
        key: String,
        line: Option<usize>,
        reason: String,
    },
}
