use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest row {row}, column `{column}`: {message}")]
    ManifestRow { row: usize, column: &'static str, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dataset `{dataset}` has no mapping for grade token `{token}`")]
    UnmappedLabel { dataset: String, token: String },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },
    #[error("split: {0}")]
    Split(String),
    #[error("blur: {0}")]
    Blur(String),
    #[error("loss: {0}")]
    Loss(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    NonFinite { epoch: usize, batch: usize, message: String },
    #[error("training: {0}")]
    Training(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("explain: {0}")]
    Explain(String),
    #[error("report: {0}")]
    Report(String),
    #[error("ablation: {0}")]
    Ablation(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig { key: key.into(), message: message.into() }
    }

    /// True for errors caused by bad user input (configuration or data contract
    /// violations) rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::ManifestRow { .. }
                | Error::Manifest(_)
                | Error::UnmappedLabel { .. }
                | Error::Split(_)
        )
    }
}
