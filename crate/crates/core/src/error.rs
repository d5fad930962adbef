use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("expected {expected} joint angles, got {got}")]
    AngleCountMismatch { expected: usize, got: usize },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),

    #[error("invalid scene configuration: {0}")]
    InvalidScene(String),

    #[error("no pose within {attempts} attempts produced a foreground fraction in [{min}, {max}]")]
    UnreachableForegroundFraction { attempts: usize, min: f64, max: f64 },

    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),

    #[error("bad image dimensions: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    BadDimensions {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("epoch {epoch} out of range for a {total}-epoch schedule")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("mask has no {0} pixels")]
    DegenerateMask(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint does not match the architecture: {0}")]
    CheckpointMismatch(String),

    #[error("need {needed} training samples, only {available} available")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
