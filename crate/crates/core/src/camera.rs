//! Pinhole camera with a stereo-disparity depth noise model.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::is_valid_depth;

/// Rectified pinhole intrinsics plus the disparity parameters that drive
/// surfel weights and fusion gates.
///
/// Depth is modelled as `d = baseline * f / disparity` with disparity noise of
/// standard deviation `disparity_sigma` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Stereo baseline in meters.
    pub baseline: f64,
    /// Disparity standard deviation in pixels.
    pub disparity_sigma: f64,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        baseline: f64,
        disparity_sigma: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            baseline,
            disparity_sigma,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.fx) || !positive(self.fy) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image size must be positive ({}x{})",
                self.width, self.height
            )));
        }
        if !positive(self.baseline) || !positive(self.disparity_sigma) {
            return Err(Error::InvalidCamera(format!(
                "baseline and disparity sigma must be positive (b={}, sigma={})",
                self.baseline, self.disparity_sigma
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("principal point is not finite".into()));
        }
        Ok(())
    }

    /// Focal length used by the radius and weight models (square pixels assumed).
    #[inline]
    pub fn focal(&self) -> f64 {
        self.fx
    }

    /// `baseline * focal`, the numerator of the disparity-to-depth relation.
    #[inline]
    pub fn bf(&self) -> f64 {
        self.baseline * self.fx
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Back-projects pixel `u` at depth `d` (z coordinate) into the camera frame.
    pub fn backproject(&self, u: &Vector2<f64>, d: f64) -> Result<Vector3<f64>> {
        if !is_valid_depth(d) {
            return Err(Error::InvalidDepth(d));
        }
        Ok(self.ray(u.x, u.y) * d)
    }

    /// `K^-1 [x, y, 1]^T`: the viewing ray through a pixel, scaled to unit z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Standard deviation of a depth measurement at `z` under the disparity model.
    #[inline]
    pub fn depth_sigma(&self, z: f64) -> f64 {
        z * z / self.bf() * self.disparity_sigma
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }
}
