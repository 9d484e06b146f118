use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported problem: {0}")]
    UnsupportedProblem(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numerical failure in {term}: {detail}")]
    NumericalFailure { term: String, detail: String },

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
