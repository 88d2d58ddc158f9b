use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("invalid probability {0}: must lie in [0, 1)")]
    InvalidProbability(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown adaptation site `{name}`; valid sites: {valid:?}")]
    UnknownSite { name: String, valid: Vec<String> },

    #[error("weight offset already applied on site `{0}`")]
    OffsetAlreadyApplied(String),

    #[error("dropout with p > 0 in training mode needs an rng")]
    MissingRng,

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("missing gradient for trainable tensor `{0}`")]
    MissingGrad(String),

    #[error("nothing to compare: {0}")]
    NothingToCompare(String),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("empty split for task {0}")]
    EmptyTask(usize),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
