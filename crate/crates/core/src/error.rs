use thiserror::Error;

/// Errors raised by the engine. Display strings start with the stable tag
/// used in logs and CLI diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-distribution")]
    EmptyDistribution,
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-scalar-root: shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown-token: id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },
    #[error("unknown-token: {0:?}")]
    UnknownTokenString(String),
    #[error("empty-class-name")]
    EmptyClassName,
    #[error("empty-side: {0}")]
    EmptySide(&'static str),
    #[error("empty-mask")]
    EmptyMask,
    #[error("non-finite-loss: {0}")]
    NonFiniteLoss(String),
    #[error("novel-label-in-stt: class {0}")]
    NovelLabelInStt(usize),
    #[error("invalid-box: [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("setup-mismatch: {0}")]
    SetupMismatch(String),
    #[error("invalid-config: {field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("wrong-stage-checkpoint: expected {expected}, found {found}")]
    WrongStage { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors that stem from user configuration rather than runtime state.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
