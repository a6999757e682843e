use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector must have at least {min} entries, got {got}")]
    TooShort { min: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: standard deviation is zero and no eps floor is set")]
    DegenerateInput,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{variant} requires {what}")]
    MissingParams { variant: &'static str, what: &'static str },

    #[error("{variant} does not accept {what}")]
    UnexpectedParams { variant: &'static str, what: &'static str },

    #[error("cache was produced by {cache} but backward was requested for {requested}")]
    VariantMismatch { cache: &'static str, requested: &'static str },

    #[error("operation not defined for variant {0}")]
    UnsupportedVariant(&'static str),

    #[error("dimension {got} exceeds the materialization limit {limit}")]
    DimensionTooLarge { got: usize, limit: usize },

    #[error("bad magic number {found:#010x} in {path}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("file {0} is truncated")]
    TruncatedFile(PathBuf),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
