use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("missing container for video {video_id}: {path}")]
    MissingContainer { video_id: String, path: PathBuf },

    #[error("invalid annotation for video {video_id}{}: {reason}", frame.map(|f| format!(" frame {f}")).unwrap_or_default())]
    Annotation {
        video_id: String,
        frame: Option<usize>,
        reason: String,
    },

    #[error("duplicate video id {0}")]
    DuplicateVideo(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: usize, components: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
