use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsineError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed dataset: {0}")]
    Format(String),
}

impl From<std::io::Error> for QsineError {
    fn from(e: std::io::Error) -> Self {
        QsineError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QsineError>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QsineError::Parameter(msg.into()))
}
