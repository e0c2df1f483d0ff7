use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("wav decode error at byte {offset}: {message}")]
    Decode { offset: u64, message: String },

    #[error("input too short: {samples} samples, need at least {window} for one frame")]
    InputTooShort { samples: usize, window: usize },

    #[error("cannot parse `{name}` as scene-city-location-segment-device.wav")]
    FilenameParse { name: String },

    #[error("triplet sampling failed for scene `{scene}`: {message}")]
    Sampling { scene: String, message: String },

    #[error("non-finite gradient in `{name}`")]
    NonFinite { name: String },

    #[error("checkpoint error in `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("manifest error (line {line}): {message}")]
    Manifest { line: usize, message: String },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn checkpoint(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Checkpoint { field: field.into(), message: msg.into() }
    }

    /// True for errors caused by bad user input (configs, manifests, flags)
    /// rather than by a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Manifest { .. } | Error::FilenameParse { .. }
        )
    }
}
