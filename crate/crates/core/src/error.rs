use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("non-finite {what} at index {index}: {value}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("entry {index} = {value} is not a probability")]
    NotAProbability { index: usize, value: f64 },

    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),

    #[error("probability floor {floor} must lie in (0, 1/{classes})")]
    FloorOutOfRange { floor: f64, classes: usize },

    #[error("epsilon {0} must lie in (0, 0.5)")]
    EpsilonOutOfRange(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch statistics need at least 2 samples per batch, got {0}")]
    BatchTooSmall(usize),

    #[error("trace does not match the backward request: {0}")]
    TraceMismatch(String),

    #[error("bad magic in checkpoint: expected \"LSCDNET\"")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: row {row}: {msg}")]
    Csv { path: PathBuf, row: usize, msg: String },

    #[error("{path}: no data rows")]
    NoDataRows { path: PathBuf },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}
