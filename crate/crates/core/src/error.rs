use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed bag file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("truncated bag file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("invalid bag `{slide_id}`: {reason}")]
    InvalidBag { slide_id: String, reason: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    /// A configuration value failed validation. `key` is the dotted config path.
    #[error("invalid config value for `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("transform precondition violated: {0}")]
    Transform(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("objective error: {0}")]
    Objective(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors the CLI reports as configuration problems (exit 1).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
