use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("batch contains no non-pad positions")]
    EmptyBatch,
    #[error("incremental state belongs to decoder {expected}, got decoder {found}")]
    StateMismatch { expected: u64, found: u64 },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("clustering error: {0}")]
    Clustering(String),
    #[error("non-finite gradient for parameter `{0}`")]
    Divergence(String),
    #[error("non-finite loss at step {step} (direction {direction})")]
    NonFiniteLoss { step: usize, direction: String },
    #[error("pair {index} of direction {direction} needs {tokens} tokens, budget is {budget}")]
    Oversize {
        direction: String,
        index: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("another timing run holds the benchmark lock")]
    ExclusiveAccess,
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
