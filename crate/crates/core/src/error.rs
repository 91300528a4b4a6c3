use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate transition at k={k}: standard deviation {std} has no density")]
    DegenerateTransition { k: usize, std: f64 },

    #[error("noise schedule has no entry for k={0}")]
    MissingScheduleEntry(usize),

    #[error("unknown class {class} (task has {num_classes} classes)")]
    UnknownClass { class: usize, num_classes: usize },

    #[error("training aborted at round {round}, epoch {epoch}: {reason}")]
    TrainingAborted {
        round: usize,
        epoch: usize,
        reason: String,
    },

    #[error("pretraining diverged at step {step}: loss {loss}")]
    PretrainDiverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },

    #[error("malformed document {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("checkpoint shape {found} does not match configured shape {expected}")]
    ShapeMismatch { found: String, expected: String },

    #[error("missing upstream artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

impl FlowError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlowError::Io {
            path: path.into(),
            source,
        }
    }
}
