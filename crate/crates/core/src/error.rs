use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("unsupported camera model {model_id} ({name})")]
    UnsupportedCameraModel { model_id: i64, name: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("depth alignment failed: {0}")]
    Alignment(String),

    #[error("scene division failed: {0}")]
    Division(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("training diverged at level {level}, iteration {iteration}: {detail}")]
    Diverged {
        level: usize,
        iteration: usize,
        detail: String,
    },

    #[error("unknown image id {0}")]
    UnknownImage(u32),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad input rather than a bug or numeric failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::State(_) | Error::NonFinite { .. } | Error::Diverged { .. }
        )
    }
}
