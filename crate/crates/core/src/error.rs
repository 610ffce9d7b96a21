use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("ill-conditioned input: smallest eigenvalue {min_eigenvalue:.3e} below floor {floor:.1e} (condition estimate {condition:.3e})")]
    IllConditioned {
        min_eigenvalue: f64,
        floor: f64,
        condition: f64,
    },

    #[error("eigen-solver failed to converge on a {dim}x{dim} matrix (Frobenius norm {norm:.3e})")]
    EigenNonConvergence { dim: usize, norm: f64 },

    #[error("matrix columns are not orthonormal (deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },

    #[error("Givens decomposition failed: entry ({row}, {col}) has residual {residual:.3e}")]
    DecompositionFailure { row: usize, col: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("region {region} of subject '{subject}' has zero variance")]
    DegenerateRegion { subject: String, region: usize },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("sampler initialization failed: {0}")]
    InitializationFailure(String),

    #[error("sign alignment undefined: {0}")]
    AlignmentUndefined(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Io { .. } | Error::Parse { .. } => 3,
            _ => 2,
        }
    }
}
