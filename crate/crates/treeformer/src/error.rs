use std::path::PathBuf;

/// Errors surfaced across the crate. Shape mismatches inside tape primitives
/// are programmer contract violations and panic instead; everything that can
/// be triggered by user input or data goes through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range (limit {limit}) in {context}")]
    Index {
        index: usize,
        limit: usize,
        context: &'static str,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error("{path}: {source}")]
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

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
