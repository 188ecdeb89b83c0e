use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("degenerate rotation: quaternion norm {0:e}")]
    DegenerateRotation(f64),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: row {row}: {msg}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid probabilities: {0}")]
    InvalidProbabilities(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
