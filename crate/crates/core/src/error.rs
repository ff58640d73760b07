use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },

    #[error("input shape mismatch: expected {expected} features, got {actual}")]
    InputShape { expected: usize, actual: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("batch size {batch_size} exceeds shard size {shard_size}")]
    BatchTooLarge {
        batch_size: usize,
        shard_size: usize,
    },

    #[error("sample {index} was never observed during warm-up")]
    UnobservedSample { index: usize },

    #[error("selection is empty: floor({rho} * {n}) = 0")]
    EmptySelection { rho: f64, n: usize },

    #[error("mask length {mask} does not match shard size {shard}")]
    MaskLength { mask: usize, shard: usize },

    #[error("step {t} is past the schedule horizon {horizon}")]
    ScheduleOverrun { t: usize, horizon: usize },

    #[error("cannot partition {samples} samples across {devices} devices")]
    InfeasiblePartition { samples: usize, devices: usize },

    #[error("cost ratio is undefined when the reference cost is zero")]
    UndefinedRatio,

    #[error("results are not comparable: {0}")]
    Comparison(String),

    #[error("dataset format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("device {device}: {source}")]
    Device {
        device: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips device attribution wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Device { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config { .. } | Error::InvalidArgument { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self.root(), Error::Io { .. })
    }
}
