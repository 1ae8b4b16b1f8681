//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable volume {path}: {reason}")]
    BadVolume { path: PathBuf, reason: String },

    #[error("non-3D image: {0}")]
    NonVolumetric(String),

    #[error("missing spacing metadata: {0}")]
    MissingSpacing(String),

    #[error("bad annotation {path}: {reason}")]
    BadAnnotation { path: PathBuf, reason: String },

    #[error("unknown vertebra name {0:?}")]
    UnknownVertebra(String),

    #[error("duplicate label {0}")]
    DuplicateLabel(String),

    #[error("empty centroid set")]
    EmptyCentroidSet,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid probabilities: {0}")]
    InvalidProbability(String),

    #[error("sampling constraint unsatisfiable after {attempts} attempts: {reason}")]
    SamplingExhausted { attempts: usize, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
