use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),

    #[error("{0}")]
    InvalidParameter(String),

    #[error("{0}")]
    InvalidData(String),

    #[error("region {region}: unrepaired gap of {len} day(s) starting at day index {start}")]
    UnrepairedGap {
        region: String,
        start: usize,
        len: usize,
    },

    #[error("region mismatch: `{0}` vs `{1}`")]
    RegionMismatch(String, String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("duplicate region id `{0}`")]
    DuplicateRegion(String),

    #[error("empty selection: {0}")]
    Empty(String),

    #[error("constant field: values have zero variance")]
    ConstantField,

    #[error("undefined correlation: input is constant")]
    UndefinedCorrelation,

    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing upstream artifact {path}; run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) => ErrorKind::Usage,
            Error::Numeric(_) | Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
