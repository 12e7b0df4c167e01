use thiserror::Error;

#[derive(Debug, Error)]
pub enum NrtError {
    #[error("config error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NrtError {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            NrtError::Config(_) | NrtError::Geometry(_) | NrtError::Json(_) => 2,
            NrtError::Numerical(_) | NrtError::Format(_) | NrtError::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, NrtError>;
