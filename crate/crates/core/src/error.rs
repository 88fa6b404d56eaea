use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "pixel value {value} at (row {row}, col {col}, channel {channel}) is outside [0, 255]"
    )]
    PixelOutOfRange {
        row: usize,
        col: usize,
        channel: usize,
        value: i64,
    },

    #[error("expected a {expected_h}x{expected_w}x3 image, got {h}x{w}x{c}")]
    ImageShape {
        expected_h: usize,
        expected_w: usize,
        h: usize,
        w: usize,
        c: usize,
    },

    #[error("image contains a non-finite or out-of-range value at flat index {index}")]
    ImageValue { index: usize },

    #[error("feature map {h}x{w} cannot be center-cropped to {crop}x{crop}")]
    CropTooLarge { h: usize, w: usize, crop: usize },

    #[error("non-finite activation in layer `{layer}`")]
    NonFiniteActivation { layer: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("classifier output for image {index} is not a probability distribution")]
    NotADistribution { index: usize },

    #[error("training slice contains a single class")]
    SingleClass,

    #[error(
        "scene classifier reached holdout accuracy {accuracy:.4}, below the required {required:.2}"
    )]
    ClassifierUnderfit { accuracy: f64, required: f64 },

    #[error("non-finite loss at step {step}; diagnostic snapshot written to {}", snapshot.display())]
    NonFiniteLoss { step: u64, snapshot: PathBuf },

    #[error("manifest entry {index}: {reason}")]
    ManifestEntry { index: usize, reason: String },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: PNG decode failed: {reason}", path.display())]
    Png { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (as opposed to runtime faults).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteActivation { .. }
                | Error::NonFiniteLoss { .. }
                | Error::ClassifierUnderfit { .. }
                | Error::Io { .. }
        )
    }
}
