//! A corridor circuit for long-run benchmarks.
//!
//! The corridor runs around a solid inner block inside a larger room. The
//! camera follows a rounded-rectangle centerline at constant speed, looking
//! sideways at the outer wall, completes one lap and then keeps going for a
//! configurable fraction of a second lap.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::scene::{render_scene, Pattern, Primitive, RenderNoise, SyntheticScene};
use crate::camera::CameraModel;
use crate::dataset_io::{synthesize_keyframes, KeyframePolicy, TrackEvent};
use crate::error::Result;
use crate::frame::Frame;
use crate::pose::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopSceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub baseline: f64,
    /// Meters travelled per frame.
    pub step: f64,
    /// Lengths of the straight centerline segments along x and y.
    pub straight_x: f64,
    pub straight_y: f64,
    pub corner_radius: f64,
    /// Distance from the centerline to the outer and inner walls.
    pub outer_distance: f64,
    pub inner_distance: f64,
    pub camera_height: f64,
    pub ceiling: f64,
    /// Length of the second pass as a fraction of a lap.
    pub revisit_fraction: f64,
    pub seed: u64,
}

impl Default for LoopSceneConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            focal: 131.25,
            baseline: 0.1,
            step: 0.06,
            straight_x: 20.0,
            straight_y: 12.0,
            corner_radius: 0.5,
            outer_distance: 1.5,
            inner_distance: 1.0,
            camera_height: 1.2,
            ceiling: 3.0,
            revisit_fraction: 0.7,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopScene {
    pub scene: SyntheticScene,
    pub camera: CameraModel,
    /// World-from-camera pose per frame.
    pub poses: Vec<Pose>,
    /// Frames in the first lap; the revisit starts at this index.
    pub lap_frames: usize,
}

impl LoopSceneConfig {
    pub fn perimeter(&self) -> f64 {
        2.0 * (self.straight_x + self.straight_y) + 2.0 * PI * self.corner_radius
    }

    /// Centerline point and outward unit normal at arc length `s`.
    pub fn centerline(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let (a, b, r) = (self.straight_x / 2.0, self.straight_y / 2.0, self.corner_radius);
        let arc = FRAC_PI_2 * r;
        let mut s = s.rem_euclid(self.perimeter());
        // Straight segment then the corner after it, counter-clockwise from
        // the start of the bottom side.
        let sides = [
            (Vector2::new(-a, -b - r), Vector2::new(1.0, 0.0), self.straight_x, Vector2::new(a, -b), -FRAC_PI_2),
            (Vector2::new(a + r, -b), Vector2::new(0.0, 1.0), self.straight_y, Vector2::new(a, b), 0.0),
            (Vector2::new(a, b + r), Vector2::new(-1.0, 0.0), self.straight_x, Vector2::new(-a, b), FRAC_PI_2),
            (Vector2::new(-a - r, b), Vector2::new(0.0, -1.0), self.straight_y, Vector2::new(-a, -b), PI),
        ];
        for (start, dir, len, corner, theta0) in sides {
            if s < len {
                return (start + dir * s, Vector2::new(dir.y, -dir.x));
            }
            s -= len;
            if s < arc {
                let th = theta0 + s / r;
                let n = Vector2::new(th.cos(), th.sin());
                return (corner + n * r, n);
            }
            s -= arc;
        }
        let (start, dir, ..) = sides[0];
        (start, Vector2::new(dir.y, -dir.x))
    }

    fn pose_at(&self, s: f64) -> Pose {
        let (p, n) = self.centerline(s);
        let forward = Vector3::new(n.x, n.y, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let right = down.cross(&forward);
        let r = Matrix3::from_columns(&[right, down, forward]);
        Pose::new(r, Vector3::new(p.x, p.y, self.camera_height)).expect("orthonormal by construction")
    }
}

impl LoopScene {
    pub fn build(cfg: &LoopSceneConfig) -> Result<Self> {
        let ext_x = cfg.straight_x / 2.0 + cfg.corner_radius;
        let ext_y = cfg.straight_y / 2.0 + cfg.corner_radius;
        let outer = Primitive::cuboid(
            Vector3::new(-ext_x - cfg.outer_distance, -ext_y - cfg.outer_distance, 0.0),
            Vector3::new(ext_x + cfg.outer_distance, ext_y + cfg.outer_distance, cfg.ceiling),
            Pattern::Cells {
                size: 0.25,
                lo: 30.0,
                hi: 220.0,
                seed: cfg.seed,
            },
        );
        let inner = Primitive::cuboid(
            Vector3::new(-ext_x + cfg.inner_distance, -ext_y + cfg.inner_distance, 0.0),
            Vector3::new(ext_x - cfg.inner_distance, ext_y - cfg.inner_distance, cfg.ceiling),
            Pattern::Checker {
                size: 0.5,
                dark: 60.0,
                light: 180.0,
            },
        );
        let scene = SyntheticScene::new(vec![outer, inner])?;
        let camera = CameraModel::new(
            cfg.focal,
            cfg.focal,
            (cfg.width as f64 - 1.0) / 2.0,
            (cfg.height as f64 - 1.0) / 2.0,
            cfg.width,
            cfg.height,
            cfg.baseline,
            1.0,
        )?;
        let lap_frames = (cfg.perimeter() / cfg.step).floor() as usize;
        let total = lap_frames + (lap_frames as f64 * cfg.revisit_fraction).round() as usize;
        let poses = (0..total).map(|i| cfg.pose_at(i as f64 * cfg.step)).collect();
        Ok(Self {
            scene,
            camera,
            poses,
            lap_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Noise-free rendering of frame `i`.
    pub fn render(&self, i: usize) -> Result<Frame> {
        let mut f = render_scene(&self.scene, &self.poses[i], &self.camera, &RenderNoise::default())?;
        f.frame_index = i;
        Ok(f)
    }

    pub fn events(&self, policy: &KeyframePolicy) -> Vec<TrackEvent> {
        let traj: Vec<(usize, Pose)> = self.poses.iter().copied().enumerate().collect();
        synthesize_keyframes(&traj, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centerline_is_continuous_and_closed() {
        let cfg = LoopSceneConfig::default();
        let p = cfg.perimeter();
        let n = 5000;
        for i in 0..n {
            let (a, na) = cfg.centerline(p * i as f64 / n as f64);
            let (b, nb) = cfg.centerline(p * (i + 1) as f64 / n as f64);
            assert!((a - b).norm() <= p / n as f64 + 1e-9);
            assert!((na.norm() - 1.0).abs() < 1e-12);
            assert!(na.dot(&nb) > 0.99);
        }
    }

    #[test]
    fn camera_sees_the_outer_wall() {
        let cfg = LoopSceneConfig::default();
        let scene = LoopScene::build(&cfg).unwrap();
        assert!(scene.lap_frames > 1050, "{}", scene.lap_frames);
        for i in [0, 100, 500, 1000, scene.len() - 1] {
            let f = scene.render(i).unwrap();
            assert_eq!(f.depth.valid_count(), cfg.width * cfg.height);
            let center = f.depth.depth(cfg.width / 2, cfg.height / 2).unwrap();
            assert!(center >= cfg.outer_distance - 1e-9, "frame {i}: {center}");
        }
        let f = scene.render(0).unwrap();
        assert!((f.depth.depth(cfg.width / 2, cfg.height / 2).unwrap() - cfg.outer_distance).abs() < 0.02);
    }
}
