use std::path::PathBuf;

use crate::surfel::KeyframeId;

/// Errors produced by the mapping library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid depth value {0}")]
    InvalidDepth(f64),

    #[error("invalid camera model: {0}")]
    InvalidCamera(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("degenerate plane: points are collinear or coincident")]
    DegeneratePlane,

    #[error("grazing surfel: viewing ray is nearly parallel to the plane")]
    GrazingSurfel,

    #[error("unknown keyframe {0}")]
    UnknownKeyframe(KeyframeId),

    #[error("deform before extract: keyframe poses changed since the last deformation")]
    StaleDeformation,

    #[error("nothing to score: map is empty")]
    NothingToScore,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("frame {frame}, stage {stage}: {source}")]
    Stage {
        frame: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
