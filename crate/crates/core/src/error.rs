use std::path::PathBuf;

use crate::geometry::Pose;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate normal: smallest eigenvalues {0:e} and {1:e} coincide")]
    DegenerateNormal(f64, f64),

    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    NearCutLocus(f64),

    #[error("scene has no gaussians")]
    EmptyScene,

    #[error("mask selects no pixels")]
    DegenerateMask,

    #[error("shading model is degenerate (masked sum of squares {0:e})")]
    DegenerateModel(f64),

    #[error("tracking failed at frame {frame}: {reason}")]
    TrackingFailure {
        frame: usize,
        reason: String,
        best: Box<Pose>,
    },

    #[error("point set is rank deficient ({0})")]
    RankDeficient(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("no keyframes to map")]
    NoKeyframes,

    #[error("surface generation: {0}")]
    Generation(String),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

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
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
