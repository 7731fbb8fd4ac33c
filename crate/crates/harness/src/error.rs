use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] qsine_core::QsineError),
    #[error(transparent)]
    Model(#[from] signalnet::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
}

impl HarnessError {
    /// 1 for usage errors, 2 for data and model errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Usage(msg.into()))
}
