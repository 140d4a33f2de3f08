use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth: disparity {0} is not positive")]
    InvalidDepth(f64),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("pixel ({x}, {y}) has no valid reprojection; no Jacobian available")]
    NoJacobian { x: usize, y: usize },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch { expected: (usize, usize), actual: (usize, usize) },

    #[error("image of {width}x{height} is too small (need at least {min}x{min})")]
    UndersizedImage { width: usize, height: usize, min: usize },

    #[error("solver stalled: {reason} (lambda={lambda:e}, cost={cost:e})")]
    SolverStall { reason: String, lambda: f64, cost: f64 },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("flow provider failed for pair ({i}, {j}): {reason}")]
    Provider { i: usize, j: usize, reason: String },

    #[error("spawn refused at pixel ({x}, {y}) of keyframe {keyframe}: {reason}")]
    SpawnRefused { keyframe: u64, x: usize, y: usize, reason: &'static str },

    #[error("map consistency violated: {0}")]
    Consistency(String),

    #[error("trajectory needs at least {needed} associated poses, got {got}")]
    TooFewPoses { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid input: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by the solver rather than by the caller's input.
    pub fn is_solver_stall(&self) -> bool {
        matches!(self, Error::SolverStall { .. })
    }
}
