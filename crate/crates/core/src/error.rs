use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("distribution is empty")]
    EmptyDistribution,

    #[error("entry {index} is not finite")]
    NonFinite { index: usize },

    #[error("negative probability {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },

    #[error("entries sum to {sum}, too far from 1 to renormalize")]
    NotNormalized { sum: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape {height}x{width} does not cover {len} cells")]
    ShapeMismatch { height: usize, width: usize, len: usize },

    #[error("KL divergence undefined: q[{index}] = 0 but p[{index}] > 0")]
    KlUndefined { index: usize },

    #[error("distribution set is empty")]
    EmptySet,

    #[error("prompt has no subjects")]
    NoSubjects,

    #[error("subject `{0}` has no attention maps")]
    EmptyGroup(String),

    #[error("map index {index} out of range for pool of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("map index {index} is claimed by both `{first}` and `{second}`")]
    OverlappingGroups { index: usize, first: String, second: String },

    #[error("NT-Xent needs at least one same-subject pair")]
    NoPositivePairs,

    #[error("zero vector has no cosine similarity (map {0})")]
    ZeroVector(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid attention matrix: {0}")]
    InvalidMatrix(String),

    #[error("token index {index} out of range for {m} prompt tokens")]
    TokenOutOfRange { index: usize, m: usize },

    #[error("block {0} not present")]
    MissingBlock(usize),

    #[error("timestep {0} not present")]
    MissingTimestep(usize),

    #[error("empty range {lo}:{hi}")]
    EmptyRange { lo: usize, hi: usize },

    #[error("series shapes differ: {0}")]
    SeriesMismatch(String),

    #[error("unsupported dump format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("invalid dump: {0}")]
    InvalidDump(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the error stems from a numerical failure rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::Numerical(_) | Error::ZeroVector(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
