use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StcrError {
    /// Shapes disagree; `axis` names the offending dimension.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StcrError {
    pub fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        StcrError::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StcrError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, StcrError>;
