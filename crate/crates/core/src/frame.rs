//! Images and input frames.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::surfel::KeyframeId;

/// Depth value marking a pixel with no measurement.
pub const INVALID_DEPTH: f64 = f64::NAN;

/// True when `d` is a usable depth measurement.
#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    // Both comparisons are false for NaN.
    d > 0.0 && d < f64::INFINITY
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Config(format!(
                "image buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}

pub type IntensityImage = Image<f32>;
pub type DepthImage = Image<f64>;

impl DepthImage {
    /// Depth at `(x, y)` if valid.
    #[inline]
    pub fn depth(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.get(x, y);
        is_valid_depth(d).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.as_slice().iter().filter(|d| is_valid_depth(**d)).count()
    }
}

/// One input frame: intensity in [0, 255], depth in meters, and the
/// camera-to-world pose from the tracker.
#[derive(Debug, Clone)]
pub struct Frame {
    pub intensity: IntensityImage,
    pub depth: DepthImage,
    pub pose: Pose,
    pub ref_keyframe: KeyframeId,
    pub frame_index: usize,
}

impl Frame {
    /// Builds a frame, normalizing every non-valid depth to the sentinel.
    pub fn new(
        intensity: IntensityImage,
        mut depth: DepthImage,
        pose: Pose,
        ref_keyframe: KeyframeId,
        frame_index: usize,
    ) -> Result<Self> {
        if intensity.width() != depth.width() || intensity.height() != depth.height() {
            return Err(Error::Config(format!(
                "intensity is {}x{} but depth is {}x{}",
                intensity.width(),
                intensity.height(),
                depth.width(),
                depth.height()
            )));
        }
        for d in depth.as_mut_slice() {
            if !is_valid_depth(*d) {
                *d = INVALID_DEPTH;
            }
        }
        Ok(Self {
            intensity,
            depth,
            pose,
            ref_keyframe,
            frame_index,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    pub fn check_camera(&self, camera: &CameraModel) -> Result<()> {
        if self.width() != camera.width || self.height() != camera.height {
            return Err(Error::Config(format!(
                "frame is {}x{} but camera is {}x{}",
                self.width(),
                self.height(),
                camera.width,
                camera.height
            )));
        }
        Ok(())
    }

    pub fn byte_size(&self) -> usize {
        self.intensity.byte_size() + self.depth.byte_size()
    }
}
