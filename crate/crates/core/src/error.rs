use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("predictions: {0}")]
    Predictions(String),

    #[error("selection: {0}")]
    Selection(String),

    #[error("labeling: {0}")]
    Labeling(String),

    #[error("ranking: {0}")]
    Ranking(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("session: {0}")]
    Session(#[from] crate::session::SessionError),

    #[error("need at least two models, got {0}")]
    TooFewModels(usize),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
