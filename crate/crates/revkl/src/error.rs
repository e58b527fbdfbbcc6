use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("file format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("non-finite value during {context}")]
    NonFinite { context: String },

    #[error("output {0} already exists (pass --force to overwrite)")]
    WouldOverwrite(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Invalid(_)
                | Error::Format { .. }
                | Error::Checkpoint(_)
                | Error::WouldOverwrite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
