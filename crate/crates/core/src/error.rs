use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input rejected by a validation rule. Maps to CLI exit status 1.
    #[error("{0}")]
    Validation(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("duplicate key (model={model}, dataset={dataset}, resolution={resolution}) at row {row}")]
    DuplicateKey {
        model: String,
        dataset: String,
        resolution: u32,
        row: usize,
    },

    #[error("dataset sets differ; symmetric difference: {0:?}")]
    Misaligned(Vec<String>),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by the filesystem rather than by the content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
