use thiserror::Error;

use crate::backend::BackendError;
use crate::store::KnowledgeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("knowledge {0} not found")]
    NotFound(KnowledgeId),

    #[error("filter parse error at position {position}: {message}")]
    Filter { position: usize, message: String },

    #[error("import failed at line {line}: {message}")]
    Import { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("command parse error: {0}")]
    CommandParse(String),

    #[error("schema error: {0}")]
    Schema(String),

    /// A numerical invariant (positive definiteness, finiteness) no longer holds.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("fetch failed for {path}: {message}")]
    Fetch { path: String, message: String },

    #[error("unsupported content type: {0}")]
    UnsupportedContent(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
