use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("value out of representable range: {0}")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_sample(index: usize, source: Error) -> Self {
        Error::AtSample {
            index,
            source: Box::new(source),
        }
    }

    /// The innermost error, looking through per-sample wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtSample { source, .. } => source.root(),
            other => other,
        }
    }
}
