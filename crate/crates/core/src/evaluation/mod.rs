//! Ground truth, accuracy scoring and timing reports.

mod loop_scene;
mod nn;
mod perf;
mod scene;

pub use loop_scene::{LoopScene, LoopSceneConfig};
pub use nn::PointCloudIndex;
pub use perf::{FrameRecord, PerfReport, Stage};
pub use scene::{render_scene, Pattern, Primitive, RenderNoise, Shape, SyntheticScene};

use std::fmt;

use crate::error::{Error, Result};
use crate::surfel::Surfel;

/// Surfels closer than this to the ground truth count as inliers.
pub const INLIER_THRESHOLD: f64 = 0.04;

/// What a map is compared against.
#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    /// Analytic surface distance.
    Scene(&'a SyntheticScene),
    /// Distance to the nearest reference point.
    Cloud(&'a PointCloudIndex),
}

impl GroundTruth<'_> {
    pub fn error(&self, s: &Surfel) -> f64 {
        match self {
            GroundTruth::Scene(scene) => scene.distance(&s.position),
            GroundTruth::Cloud(cloud) => cloud.nearest(&s.position).1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub mean_error: f64,
    pub median_error: f64,
    pub inlier_fraction: f64,
    pub surfel_count: usize,
}

impl AccuracyReport {
    pub const CSV_HEADER: &'static str = "surfels,mean_error_m,median_error_m,inlier_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.surfel_count, self.mean_error, self.median_error, self.inlier_fraction
        )
    }
}

impl fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "surfels:         {}", self.surfel_count)?;
        writeln!(f, "mean error:      {:.4} cm", self.mean_error * 100.0)?;
        writeln!(f, "median error:    {:.4} cm", self.median_error * 100.0)?;
        write!(
            f,
            "inliers (<{:.0} cm): {:.2}%",
            INLIER_THRESHOLD * 100.0,
            self.inlier_fraction * 100.0
        )
    }
}

/// Per-surfel distance to the ground truth, aggregated.
pub fn score_accuracy<'a>(surfels: impl IntoIterator<Item = &'a Surfel>, truth: GroundTruth<'_>) -> Result<AccuracyReport> {
    let mut errors: Vec<f64> = surfels.into_iter().map(|s| truth.error(s)).collect();
    if errors.is_empty() {
        return Err(Error::NothingToScore);
    }
    let n = errors.len();
    let mean_error = errors.iter().sum::<f64>() / n as f64;
    let inlier_fraction = errors.iter().filter(|&&e| e < INLIER_THRESHOLD).count() as f64 / n as f64;
    errors.sort_by(f64::total_cmp);
    let median_error = if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    };
    Ok(AccuracyReport {
        mean_error,
        median_error,
        inlier_fraction,
        surfel_count: n,
    })
}
