use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed code {raw:?}: {reason}")]
    MalformedCode { raw: String, reason: &'static str },

    #[error("{path}:{line}: GEM parse error: {msg}")]
    GemParse { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: ACME parse error: {msg}")]
    AcmeParse { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: {msg}")]
    CorpusParse { path: PathBuf, line: usize, msg: String },

    #[error("line count mismatch: {src_lines} source lines vs {tgt_lines} target lines")]
    LineCountMismatch { src_lines: usize, tgt_lines: usize },

    #[error("invalid record {id}: {msg}")]
    InvalidRecord { id: String, msg: String },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("token index {index} out of vocabulary (size {size})")]
    OutOfVocabIndex { index: usize, size: usize },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad input data rather than runtime failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self.root(),
            Error::MalformedCode { .. }
                | Error::GemParse { .. }
                | Error::AcmeParse { .. }
                | Error::CorpusParse { .. }
                | Error::LineCountMismatch { .. }
                | Error::InvalidRecord { .. }
                | Error::ConfigInvalid(_)
                | Error::EmptyCorpus
                | Error::Checkpoint(_)
                | Error::Json(_)
                | Error::Io { .. }
        )
    }
}
