use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model specification or choice-set rule cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that are well-formed but violate a contract (missing names, bad lengths).
    #[error("validation error: {0}")]
    Validation(String),

    /// A delimited input file could not be read, with the 1-based file line when known.
    #[error("{}: {}{message}", path.display(), row.map(|r| format!("line {r}: ")).unwrap_or_default())]
    Load {
        path: PathBuf,
        row: Option<usize>,
        message: String,
    },

    /// Data that loaded but is inconsistent with the model.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced a non-finite or degenerate value.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("singular information matrix; near-collinear parameters: {}", pairs.join(", "))]
    Singular { pairs: Vec<String> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            row,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
