use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GistError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GistError {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("gist id in raw input (id {id} at position {position})")]
    GistIdInRawInput { id: u32, position: usize },

    #[error("invalid gist count {0}; need at least 1")]
    InvalidGistCount(usize),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("nothing to predict: sequence length {0} < 2")]
    NothingToPredict(usize),

    #[error("non-finite loss in batch item {index}")]
    NonFiniteLoss { index: usize },

    #[error("covariance not PD; set eps>0")]
    CovarianceNotPd,

    #[error("no gist tokens; rate undefined")]
    NoGistTokens,

    #[error("mask of size {n} is too large to render (limit {limit})")]
    RenderTooLarge { n: usize, limit: usize },

    #[error("vocab hash mismatch: expected {expected}, found {found}")]
    VocabHashMismatch { expected: String, found: String },

    #[error("config hash mismatch: checkpoint has {stored}, run has {current}")]
    ConfigHashMismatch { stored: String, current: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cache does not match model: {0}")]
    CacheMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error("missing {0}")]
    Missing(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GistError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GistError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        GistError::Format {
            what,
            detail: detail.into(),
        }
    }
}
