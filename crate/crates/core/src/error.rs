use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("unknown behavior `{name}` at {path}:{line}")]
    UnknownBehavior { path: PathBuf, line: usize, name: String },

    #[error("invalid behavior schema: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("catalog has {0} item(s); at least 2 are needed to sample negatives")]
    CatalogTooSmall(usize),

    #[error("cannot predict from an empty sequence")]
    EmptySequence,

    #[error("learning-rate schedule needs total_steps > 0")]
    ZeroTotalSteps,

    #[error("not a checkpoint file: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint dtype code {found} does not match requested {expected}")]
    DTypeMismatch { found: u8, expected: u8 },

    #[error("cannot compute metrics over an empty rank list")]
    EmptyRanks,

    #[error("unknown ablation variant `{name}`; valid names: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("masking behavior `{0}` removes every training interaction")]
    MaskEmptiesData(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
