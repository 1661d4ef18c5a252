use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid model: {0}")]
    Layer(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}:{line}:{column}: {detail}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        detail: String,
    },

    #[error("config {origin}:{line}: key `{key}`: {detail}")]
    Config {
        origin: String,
        line: usize,
        key: String,
        detail: String,
    },

    #[error("bundle format version {found} is not supported (this build reads version {expected})")]
    BundleVersion { found: u32, expected: u32 },

    #[error("bundle truncated: expected {expected} bytes, found {found}")]
    BundleTruncated { expected: u64, found: u64 },

    #[error("bundle checksum mismatch")]
    BundleChecksum,

    #[error("bundle malformed: {0}")]
    BundleFormat(String),

    #[error("pipeline order violated: {0}")]
    PipelineOrder(String),

    #[error("data leakage: statistics fitted on test trial `{0}`")]
    Leakage(String),

    #[error("missing artifact {}: {detail}", path.display())]
    MissingArtifact { path: PathBuf, detail: String },

    #[error("io error at {}: {source}", path.display())]
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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
