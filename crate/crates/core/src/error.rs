//! Error taxonomy shared by every module.
//!
//! Each variant corresponds to one machine-parsable category emitted by the
//! CLI on failure (`error[<category>]: <message>`).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible beyond broadcast rules.
    #[error("dimension: {0}")]
    Dimension(String),

    /// A numeric op produced NaN/Inf, or a loss left the finite domain.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Invalid configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Token not present in the vocabulary.
    #[error("vocabulary: {0}")]
    Vocabulary(String),

    /// Operation invoked in a state its preconditions forbid
    /// (e.g. checkpoint lineage mismatch).
    #[error("state: {0}")]
    State(String),

    /// Degenerate camera or other geometric precondition failure.
    #[error("geometry: {0}")]
    Geometry(String),

    /// Bad user-supplied input data (missing captures, empty batch, ...).
    #[error("input: {0}")]
    Input(String),

    /// Filesystem / serialization failure.
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Stable one-word category used in CLI error lines and exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Vocabulary(_) => "vocabulary",
            Error::State(_) => "state",
            Error::Geometry(_) => "geometry",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
