use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite value surfaced during optimization or evaluation.
    /// `term` names the loss part or intermediate that went bad.
    #[error("numeric error in `{term}`: {detail}")]
    Numeric { term: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
