use thiserror::Error;

#[derive(Error, Debug)]
pub enum EgnError {
    #[error("dimension error in {op}: {details}")]
    Shape { op: String, details: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient exemplars: requested k={requested}, only {eligible} eligible entries")]
    InsufficientExemplars { requested: usize, eligible: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-deterministic closure: {0}")]
    NonDeterministic(String),

    #[error("NaN encountered at {0}; aborting")]
    Nan(String),

    #[error("missing artifact: {what} (produce it with `{produced_by}`)")]
    MissingArtifact { what: String, produced_by: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EgnError {
    pub fn shape(op: impl Into<String>, details: impl Into<String>) -> Self {
        EgnError::Shape { op: op.into(), details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, EgnError>;
