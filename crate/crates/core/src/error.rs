use std::path::PathBuf;

/// Errors produced by the assessment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid trait-relevant statement {id:?}: {message}")]
    InvalidTrs { id: String, message: String },

    #[error("duplicate statement id {0:?}")]
    DuplicateId(String),

    #[error("unknown statement id {0:?}")]
    UnknownTrs(String),

    #[error("invalid comment {target_id}/{comment_id}: {message}")]
    InvalidComment {
        target_id: String,
        comment_id: String,
        message: String,
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("backend mismatch: {left:?} vs {right:?}")]
    BackendMismatch { left: String, right: String },

    #[error("backend {backend_id} failed{}: {message}", if *.retriable { " (retriable)" } else { "" })]
    Backend {
        backend_id: String,
        retriable: bool,
        message: String,
    },

    #[error("backend {backend_id} has no vectors for {} text(s): {}", .missing.len(), .missing.join(", "))]
    MissingVectors {
        backend_id: String,
        missing: Vec<String>,
    },

    #[error("detection failed after {completed} of {total} candidates: {source}")]
    PartialDetection {
        completed: usize,
        total: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("service {service} failed{}: {message}", if *.retriable { " (retriable)" } else { "" })]
    Service {
        service: String,
        retriable: bool,
        message: String,
    },

    #[error("project lock held: {0}")]
    Locked(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether retrying the same call may succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            Error::Backend { retriable, .. } | Error::Service { retriable, .. } => *retriable,
            Error::PartialDetection { source, .. } => source.is_retriable(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
