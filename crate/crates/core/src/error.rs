use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus not found at {0}")]
    CorpusNotFound(PathBuf),

    #[error("corrupt sample {path}: {reason}")]
    CorruptSample { path: PathBuf, reason: String },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("missing ground-truth masks for classes: {}", .0.join(", "))]
    MissingMasks(Vec<String>),

    #[error("invalid pseudo-anomaly spec: {0}")]
    InvalidSpec(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid beta schedule: {0}")]
    InvalidSchedule(String),

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corpus fingerprint mismatch: checkpoint {expected}, corpus {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("empty train split")]
    EmptyTrainSplit,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for the command line: 1 usage, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::CorpusNotFound(_)
            | Error::CorruptSample { .. }
            | Error::UnknownClass(_)
            | Error::MissingMasks(_)
            | Error::EmptyTrainSplit
            | Error::FingerprintMismatch { .. }
            | Error::Io { .. }
            | Error::Image { .. } => 2,
            _ => 3,
        }
    }
}
