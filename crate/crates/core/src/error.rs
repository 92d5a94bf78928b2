use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Image or mask dimensions are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar parameter lies outside its admissible range.
    #[error("range error: {0}")]
    Range(String),

    /// Grid masks only support ratios of the form 1/k².
    #[error("unsupported grid ratio {ratio}: nearest supported ratios are {lower} and {upper}")]
    UnsupportedRatio { ratio: f64, lower: f64, upper: f64 },

    #[error("mask has no masked cells")]
    EmptyMask,

    #[error("shape error: {0}")]
    Shape(String),

    /// Two inputs that must describe the same layout disagree.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dataset unavailable at {path}: {reason}\n{hint}")]
    Dataset {
        path: PathBuf,
        reason: String,
        hint: String,
    },

    #[error("training diverged at epoch {epoch} step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a malformed configuration rather than by a
    /// runtime failure. The CLI maps these to exit status 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Range(_)
                | Error::UnsupportedRatio { .. }
                | Error::Parse(_)
                | Error::Dimension(_)
        )
    }
}
