use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("client {client}: mean latent representation has near-zero norm ({norm:e})")]
    DegenerateLatent { client: usize, norm: f64 },

    #[error("client {client} diverged at local step {step}: {reason}")]
    Training { client: usize, step: usize, reason: String },

    #[error("configuration error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("metrics schema mismatch: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
