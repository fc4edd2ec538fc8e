use std::path::PathBuf;

use thiserror::Error;

use crate::design::BlockIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate covariate `{name}`: {reason}")]
    DegenerateCovariate { name: String, reason: String },

    #[error("degenerate block {block}: ridge system is not positive definite")]
    DegenerateBlock { block: BlockIndex },

    #[error("zero-variance column `{column}` cannot be standardized")]
    ZeroVariance { column: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("response column `{0}` not found")]
    MissingResponse(String),

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported model archive version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("model archive checksum mismatch (file truncated or corrupted)")]
    Checksum,

    #[error("malformed model archive: {0}")]
    Archive(String),

    #[error("block {block} is not part of the model support")]
    NotInSupport { block: BlockIndex },

    #[error("empty grid: no fitted nodes with validation metrics")]
    EmptyGrid,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
