//! Dense surfel mapping on the CPU.
//!
//! Intensity/depth frames with externally tracked poses are segmented into
//! superpixels, each superpixel seeds one surfel, and new surfels are fused
//! into the subset of the map attached to keyframes near the current one in
//! the pose graph. Pose-graph corrections deform the map by moving every
//! keyframe's surfels rigidly with their keyframe.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod fusion;
pub mod pipeline;
pub mod ply;
pub mod pose;
pub mod pose_graph;
pub mod superpixel;
pub mod surfel;
pub mod surfel_init;

pub use camera::CameraModel;
pub use error::{Error, Result};
pub use frame::{is_valid_depth, DepthImage, Frame, Image, IntensityImage, INVALID_DEPTH};
pub use pose::Pose;
pub use surfel::{KeyframeId, Surfel};
