//! Analytic scenes made of planes and axis-aligned boxes, and a ray caster
//! that renders them through the pinhole model.

use nalgebra::{Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::frame::{Frame, Image};
use crate::pose::Pose;
use crate::surfel::KeyframeId;

/// Surface intensity as a function of in-surface coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    Constant(f32),
    Checker { size: f64, dark: f32, light: f32 },
    /// Square cells of pseudo-random intensity in `[lo, hi]`.
    Cells { size: f64, lo: f32, hi: f32, seed: u64 },
}

fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add((a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Pattern {
    pub fn sample(&self, uv: Vector2<f64>) -> f32 {
        match *self {
            Pattern::Constant(c) => c,
            Pattern::Checker { size, dark, light } => {
                let k = (uv.x / size).floor() as i64 + (uv.y / size).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    dark
                } else {
                    light
                }
            }
            Pattern::Cells { size, lo, hi, seed } => {
                let h = hash3((uv.x / size).floor() as i64, (uv.y / size).floor() as i64, seed);
                lo + (hi - lo) * ((h >> 40) as f32 / (1u64 << 24) as f32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Points `p` with `normal . p = offset`.
    Plane { normal: Unit<Vector3<f64>>, offset: f64 },
    /// Axis-aligned box; rays from inside hit its inner walls.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub pattern: Pattern,
}

impl Primitive {
    pub fn plane(normal: Vector3<f64>, offset: f64, pattern: Pattern) -> Self {
        Self {
            shape: Shape::Plane {
                normal: Unit::new_normalize(normal),
                offset,
            },
            pattern,
        }
    }

    pub fn cuboid(min: Vector3<f64>, max: Vector3<f64>, pattern: Pattern) -> Self {
        Self {
            shape: Shape::Cuboid { min, max },
            pattern,
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self.shape {
            Shape::Plane { normal, offset } => (normal.dot(p) - offset).abs(),
            Shape::Cuboid { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = (p - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
        }
    }

    /// Nearest hit with `t > t_min` along `origin + t * dir`, with the
    /// in-surface coordinates of the hit.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<(f64, Vector2<f64>)> {
        match self.shape {
            Shape::Plane { normal, offset } => {
                let den = normal.dot(dir);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / den;
                (t > t_min).then(|| {
                    let p = origin + dir * t;
                    let u = normal.cross(&Vector3::x()).try_normalize(1e-6).unwrap_or_else(|| normal.cross(&Vector3::y()).normalize());
                    let v = normal.cross(&u);
                    (t, Vector2::new(u.dot(&p), v.dot(&p)))
                })
            }
            Shape::Cuboid { min, max } => {
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut near_axis, mut far_axis) = (0, 0);
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (min[a] - origin[a]) / dir[a];
                    let t1 = (max[a] - origin[a]) / dir[a];
                    let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                    if lo > t_near {
                        t_near = lo;
                        near_axis = a;
                    }
                    if hi < t_far {
                        t_far = hi;
                        far_axis = a;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > t_min {
                    (t_near, near_axis)
                } else if t_far > t_min {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let p = origin + dir * t;
                let uv = match axis {
                    0 => Vector2::new(p.y, p.z),
                    1 => Vector2::new(p.x, p.z),
                    _ => Vector2::new(p.x, p.y),
                };
                Some((t, uv))
            }
        }
    }
}

/// A set of primitives with analytic geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    primitives: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::EmptyInput("scene primitives"));
        }
        Ok(Self { primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    /// Bounding box of the box primitives, if any.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        self.primitives
            .iter()
            .filter_map(|p| match p.shape {
                Shape::Cuboid { min, max } => Some((min, max)),
                Shape::Plane { .. } => None,
            })
            .reduce(|(a0, a1), (b0, b1)| (a0.inf(&b0), a1.sup(&b1)))
    }

    /// Distance from `p` to the nearest surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Nearest surface hit along a ray: `(t, intensity)`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f32)> {
        let mut best: Option<(f64, f32)> = None;
        for prim in &self.primitives {
            if let Some((t, uv)) = prim.intersect(origin, dir, 1e-9) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, prim.pattern.sample(uv)));
                }
            }
        }
        best
    }
}

/// Sensor imperfections applied by [`render_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderNoise {
    /// Standard deviation of additive disparity noise, in pixels.
    pub disparity_sigma: f64,
    /// Fraction of pixels whose depth is dropped.
    pub invalid_fraction: f64,
    pub seed: u64,
}

impl Default for RenderNoise {
    fn default() -> Self {
        Self {
            disparity_sigma: 0.0,
            invalid_fraction: 0.0,
            seed: 0,
        }
    }
}

impl RenderNoise {
    pub fn disparity(sigma: f64, seed: u64) -> Self {
        Self {
            disparity_sigma: sigma,
            seed,
            ..Self::default()
        }
    }
}

/// Ray-casts `scene` from `pose` (world-from-camera). Depth noise is added to
/// the disparity `b f / z` and converted back; pixels that see nothing or
/// whose noisy disparity is not positive are invalid.
pub fn render_scene(scene: &SyntheticScene, pose: &Pose, camera: &CameraModel, noise: &RenderNoise) -> Result<Frame> {
    let (w, h) = (camera.width, camera.height);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let gauss = Normal::new(0.0, noise.disparity_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("disparity noise: {e}")))?;
    let bf = camera.bf();
    let origin = *pose.translation();
    let mut intensity = Image::filled(w, h, 0.0f32);
    let mut depth = Image::filled(w, h, f64::NAN);
    for y in 0..h {
        for x in 0..w {
            let ray = camera.ray(x as f64, y as f64);
            let dir = pose.transform_vector(&ray);
            // Draws happen for every pixel so the noise stream does not
            // depend on the scene.
            let drop = rng.random::<f64>() < noise.invalid_fraction;
            let n = if noise.disparity_sigma > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
            let Some((t, c)) = scene.raycast(&origin, &dir) else {
                continue;
            };
            intensity.set(x, y, c);
            if drop {
                continue;
            }
            // `ray` has unit z, so the ray parameter is the depth.
            let d = if n == 0.0 {
                t
            } else {
                let disp = bf / t + n;
                if disp <= 0.0 {
                    continue;
                }
                bf / disp
            };
            depth.set(x, y, d);
        }
    }
    Frame::new(intensity, depth, *pose, KeyframeId(0), 0)
}
