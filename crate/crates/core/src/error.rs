use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE are accepted)")]
    UnsupportedCameraModel(String),
    #[error("ply: {0}")]
    Ply(String),
    #[error("image: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sparse voxel grid is empty; the scene has no usable SfM points")]
    EmptyGrid,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("appearance index {index} out of range for {count} images")]
    ImageIndex { index: usize, count: usize },
    #[error("no trainable rays: every pixel is transient or misses the voxel envelope")]
    EmptyBatch,
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
    #[error("icp needs at least 3 correspondences, found {0}")]
    TooFewCorrespondences(usize),
    #[error("F1 never reaches {target} on the threshold ladder (max {best:.2} at {at}); extend the ladder")]
    ThresholdNotReached { target: f64, best: f64, at: f64 },
    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown shape `{0}` (expected sphere, box or two-spheres)")]
    UnknownShape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(file: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { file: file.to_string(), line, msg: msg.into() }
    }
}
