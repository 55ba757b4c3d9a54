//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any stage of the pipeline.
///
/// The CLI maps these onto exit codes: configuration/usage problems exit
/// with 1, data and file problems with 2, numeric failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File does not follow the expected on-disk layout (bad magic,
    /// unsupported version, truncated body, unparsable CSV field).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must describe the same points disagree.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Values inside a structurally valid file violate an invariant
    /// (NaN vectors, confidence outside [0,1], duplicate ids).
    #[error("data error: {0}")]
    Data(String),

    /// Vector dimensionality does not match what the consumer expects.
    #[error("shape error: expected dim {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// A kNN query cannot be answered as posed.
    #[error("query error: {0}")]
    Query(String),

    /// An index cannot be constructed over the given set.
    #[error("index build error: {0}")]
    Build(String),

    /// A ranking metric is undefined for the given labels.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The operation needs inputs that were not provided (e.g. class
    /// logits for temperature calibration).
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    /// Training targets are all identical; there is nothing to learn.
    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    /// A numeric procedure failed beyond what regularization can absorb.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A referenced class or point id is unknown.
    #[error("lookup error: {0}")]
    Lookup(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
