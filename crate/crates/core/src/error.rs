use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{xmin}, {ymin}, {xmax}, {ymax}]: {reason}")]
    InvalidBox {
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
        reason: &'static str,
    },

    #[error("invalid probability for {field}: {value}")]
    InvalidProbability { field: &'static str, value: f64 },

    #[error("ground-truth box has zero area; intersection over area is undefined")]
    DegenerateGroundTruth,

    #[error("predicted box has zero width or height; multiplicative scores are undefined")]
    DegeneratePrediction,

    #[error("inputs mix image ids `{0}` and `{1}`")]
    MixedImageIds(String, String),

    #[error(
        "insufficient calibration samples for requested level: n = {n}, beta = {beta}, \
         rank {rank} exceeds n (need at least {min_n} samples)"
    )]
    InsufficientCalibration {
        n: usize,
        beta: f64,
        rank: usize,
        min_n: usize,
    },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("length mismatch: {left} conformal boxes vs {right} ground truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("record {index}: field `{field}`: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },

    #[error("unknown report format `{0}` (expected `json` or `table`)")]
    UnknownFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
