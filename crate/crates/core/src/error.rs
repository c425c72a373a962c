use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular transform matrix")]
    Singular,

    #[error("non-finite distribution update at generation {generation}")]
    NonFiniteUpdate { generation: usize },

    #[error("malformed prior document: {0}")]
    MalformedPrior(String),

    #[error("unknown problem id `{0}`")]
    UnknownProblem(String),

    #[error("unknown constant `{key}` for problem `{problem}`")]
    UnknownConstant { problem: &'static str, key: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
