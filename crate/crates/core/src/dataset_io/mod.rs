//! On-disk sequences: manifests, camera files, images and tracking events.

mod events;
mod keyframes;

pub use events::{load_track_events, parse_track_events, serialize_track_events, write_track_events, PoseRecord, TrackEvent};
pub use keyframes::{synthesize_keyframes, trajectory_to_events, load_tum_trajectory, KeyframePolicy};

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::frame::{DepthImage, Frame, Image, IntensityImage};
use crate::pose::Pose;
use crate::surfel::KeyframeId;

/// Stored depth units per meter used by TUM and ICL-NUIM.
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub timestamp: f64,
    pub intensity: PathBuf,
    pub depth: PathBuf,
}

/// An image sequence with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub entries: Vec<ManifestEntry>,
    pub camera: CameraModel,
    pub depth_scale: f64,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn load_err(path: &Path, msg: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| load_err(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("invalid number '{tok}'")))
}

/// Parses `fx fy cx cy width height baseline sigma depth_scale`.
pub fn parse_camera(text: &str, path: &Path) -> Result<(CameraModel, f64)> {
    let (line, body) = content_lines(text)
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty camera file"))?;
    let t: Vec<&str> = body.split_whitespace().collect();
    if t.len() != 9 {
        return Err(parse_err(path, line, format!("expected 9 fields, found {}", t.len())));
    }
    let f = |i: usize| parse_num::<f64>(t[i], path, line);
    let camera = CameraModel::new(
        f(0)?,
        f(1)?,
        f(2)?,
        f(3)?,
        parse_num(t[4], path, line)?,
        parse_num(t[5], path, line)?,
        f(6)?,
        f(7)?,
    )
    .map_err(|e| parse_err(path, line, e.to_string()))?;
    let scale = f(8)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(parse_err(path, line, "depth_scale must be positive"));
    }
    Ok((camera, scale))
}

pub fn load_camera(path: &Path) -> Result<(CameraModel, f64)> {
    parse_camera(&read_text(path)?, path)
}

pub fn write_camera(path: &Path, camera: &CameraModel, depth_scale: f64) -> Result<()> {
    let c = camera;
    let text = format!(
        "# fx fy cx cy width height baseline sigma depth_scale\n{} {} {} {} {} {} {} {} {}\n",
        c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.baseline, c.disparity_sigma, depth_scale
    );
    fs::write(path, text).map_err(|e| load_err(path, e))
}

/// Parses manifest lines `timestamp intensity_path depth_path`. Relative
/// paths are resolved against `base`.
pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (line, body) in content_lines(text) {
        let t: Vec<&str> = body.split_whitespace().collect();
        if t.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", t.len())));
        }
        let timestamp: f64 = parse_num(t[0], path, line)?;
        if let Some(prev) = entries.last() {
            if !(timestamp > prev.timestamp) {
                return Err(parse_err(path, line, "timestamps must be strictly increasing"));
            }
        }
        entries.push(ManifestEntry {
            timestamp,
            intensity: base.join(t[1]),
            depth: base.join(t[2]),
        });
    }
    Ok(entries)
}

/// Reads a manifest and a camera file and checks that every image exists.
pub fn load_sequence(manifest: &Path, camera: &Path) -> Result<SequenceManifest> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let entries = parse_manifest(&read_text(manifest)?, manifest, base)?;
    for e in &entries {
        for p in [&e.intensity, &e.depth] {
            if !p.is_file() {
                return Err(load_err(p, "file not found"));
            }
        }
    }
    let (camera, depth_scale) = load_camera(camera)?;
    Ok(SequenceManifest {
        entries,
        camera,
        depth_scale,
    })
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes the images of entry `index`.
    pub fn load_images(&self, index: usize) -> Result<(IntensityImage, DepthImage)> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Config(format!("frame {index} not in manifest ({} entries)", self.len())))?;
        let intensity = load_intensity(&e.intensity)?;
        let depth = load_depth(&e.depth, self.depth_scale)?;
        let (w, h) = (self.camera.width, self.camera.height);
        for (p, dims) in [(&e.intensity, (intensity.width(), intensity.height())), (&e.depth, (depth.width(), depth.height()))] {
            if dims != (w, h) {
                return Err(load_err(p, format!("image is {}x{}, camera expects {w}x{h}", dims.0, dims.1)));
            }
        }
        Ok((intensity, depth))
    }

    /// Loads entry `index` as a frame with the given pose and reference keyframe.
    pub fn load_frame(&self, index: usize, pose: Pose, ref_keyframe: KeyframeId) -> Result<Frame> {
        let (intensity, depth) = self.load_images(index)?;
        Frame::new(intensity, depth, pose, ref_keyframe, index)
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| load_err(path, e))
}

/// Loads an image as grayscale intensity in [0, 255]. Color images are
/// converted with luminance weights 0.299, 0.587, 0.114.
pub fn load_intensity(path: &Path) -> Result<IntensityImage> {
    intensity_from_image(open_image(path)?, path)
}

fn luminance(r: f64, g: f64, b: f64) -> f32 {
    (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 255.0) as f32
}

fn intensity_from_image(img: DynamicImage, path: &Path) -> Result<IntensityImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| f32::from(p.0[0])).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| f32::from(v) / 257.0).collect(),
        DynamicImage::ImageRgb8(b) => b
            .pixels()
            .map(|p| luminance(p.0[0].into(), p.0[1].into(), p.0[2].into()))
            .collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| luminance(p.0[0].into(), p.0[1].into(), p.0[2].into()))
            .collect(),
        other => other
            .into_rgb16()
            .pixels()
            .map(|p| luminance(p.0[0] as f64 / 257.0, p.0[1] as f64 / 257.0, p.0[2] as f64 / 257.0))
            .collect(),
    };
    Image::from_vec(w, h, data).map_err(|e| load_err(path, e))
}

/// Loads a 16-bit single-channel depth image; stored 0 becomes invalid.
pub fn load_depth(path: &Path, depth_scale: f64) -> Result<DepthImage> {
    let img = open_image(path)?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(load_err(path, format!("depth must be 16-bit single channel, found {:?}", img.color())));
    };
    Ok(depth_from_raw(buf.width() as usize, buf.height() as usize, buf.as_raw(), depth_scale))
}

pub fn depth_from_raw(width: usize, height: usize, raw: &[u16], depth_scale: f64) -> DepthImage {
    Image::from_fn(width, height, |x, y| match raw[y * width + x] {
        0 => f64::NAN,
        v => v as f64 / depth_scale,
    })
}

/// Writes intensity as an 8-bit grayscale PNG (values rounded).
pub fn write_intensity_png(path: &Path, img: &IntensityImage) -> Result<()> {
    let raw: Vec<u8> = img.as_slice().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| load_err(path, e))
}

/// Writes depth as a 16-bit PNG in units of `1/depth_scale` meters;
/// invalid or out-of-range depth is stored as 0.
pub fn write_depth_png(path: &Path, depth: &DepthImage, depth_scale: f64) -> Result<()> {
    let raw: Vec<u16> = depth
        .as_slice()
        .iter()
        .map(|&d| {
            let v = (d * depth_scale).round();
            if v.is_finite() && v >= 1.0 && v <= u16::MAX as f64 {
                v as u16
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| load_err(path, e))
}

/// Writes a manifest with paths relative to the manifest's directory.
pub fn write_manifest(path: &Path, entries: &[(f64, &str, &str)]) -> Result<()> {
    let mut text = String::from("# timestamp intensity depth\n");
    for (t, i, d) in entries {
        text.push_str(&format!("{t} {i} {d}\n"));
    }
    fs::write(path, text).map_err(|e| load_err(path, e))
}
