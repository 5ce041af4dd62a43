use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// The variants are grouped so a front end can map them onto exit codes:
/// [`Error::Config`] is a configuration problem, everything that concerns the
/// content of files or tensors is a data problem.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: u32 },

    #[error("invalid dimensions: {0}")]
    Dims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index:?} out of bounds for {bounds:?}")]
    OutOfBounds { index: Vec<usize>, bounds: Vec<usize> },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by configuration rather than by data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
