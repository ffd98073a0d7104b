use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: score matrix of {required} elements exceeds the budget of {budget}")]
    Capacity {
        op: &'static str,
        required: usize,
        budget: usize,
    },

    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("record {line} ({raw_file}): {message}")]
    Validation {
        line: usize,
        raw_file: String,
        message: String,
    },

    #[error("fit impossible: {0}")]
    FitImpossible(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("image {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("architecture mismatch:\n{0}")]
    ConfigMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
