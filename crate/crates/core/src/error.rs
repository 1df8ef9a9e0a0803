use std::path::PathBuf;

use thiserror::Error;

use crate::morton::MortonKey;

pub type Result<T, E = FmmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FmmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("particle {index} at {position:?} lies outside the domain")]
    OutsideDomain { index: usize, position: [f64; 3] },

    #[error("cannot refine {key:?} past the maximum tree level")]
    MaxLevelExceeded { key: MortonKey },

    #[error("matrix `{matrix}` is numerically rank deficient: {detail}")]
    RankDeficient { matrix: String, detail: String },

    #[error("no M2L matrix cached for transfer vector {0:?}")]
    MissingTransferVector([i32; 3]),

    #[error("operator cache has not been attached")]
    MissingCache,

    #[error("reference vector has zero norm")]
    ZeroNorm,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt file: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: u32,
    },

    #[error("{path}: cache fingerprint {found} does not match {expected}")]
    FingerprintMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("failed to build thread pool: {0}")]
    ThreadPool(String),
}

impl FmmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FmmError::InvalidArgument(msg.into())
    }

    /// Whether the error stems from a numerical failure rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FmmError::RankDeficient { .. } | FmmError::MissingTransferVector(_) | FmmError::ZeroNorm
        )
    }
}
