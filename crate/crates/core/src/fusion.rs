//! Fusion of newly initialized surfels into the local map.
//!
//! Local surfels are moved into the current camera frame and projected into
//! the image. A local surfel corresponds to the new surfel of the superpixel
//! it lands in when their depths agree within the sensor's depth uncertainty
//! and their normals are close. Corresponding pairs are merged by weighted
//! averaging; new surfels without a partner are added as they are.

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::pose::Pose;
use crate::superpixel::Segmentation;
use crate::surfel::{KeyframeId, Surfel};
use crate::surfel_init::FrameSurfels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Minimum dot product between corresponding normals.
    pub normal_dot_min: f64,
    /// Depth gate width in disparity standard deviations.
    pub depth_gate_sigmas: f64,
    /// Surfels attached more than this many keyframes away from the
    /// reference are candidates for pruning...
    pub prune_keyframe_gap: u32,
    /// ...and are removed if updated fewer than this many times.
    pub prune_min_updates: u32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            normal_dot_min: 0.8,
            depth_gate_sigmas: 2.0,
            prune_keyframe_gap: 10,
            prune_min_updates: 5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.normal_dot_min > 0.0 && self.normal_dot_min <= 1.0)
            || !(self.depth_gate_sigmas > 0.0)
            || self.prune_keyframe_gap == 0
            || self.prune_min_updates == 0
        {
            return Err(Error::Config(format!("invalid fusion parameters: {self:?}")));
        }
        Ok(())
    }

    /// True if a surfel should be dropped given the current reference keyframe.
    #[inline]
    pub fn should_prune(&self, s: &Surfel, reference: KeyframeId) -> bool {
        s.attached_keyframe.gap(reference) > self.prune_keyframe_gap
            && s.update_count < self.prune_min_updates
    }
}

/// Largest depth difference accepted for a local surfel at depth `z`.
#[inline]
pub fn depth_gate(z: f64, camera: &CameraModel, cfg: &FusionConfig) -> f64 {
    z * z / camera.bf() * cfg.depth_gate_sigmas * camera.disparity_sigma
}

/// Maps superpixel index to the new surfel it produced.
#[derive(Debug, Clone)]
pub struct CenterLookup {
    by_center: Vec<u32>,
}

impl CenterLookup {
    const NONE: u32 = u32::MAX;

    pub fn new(new_surfels: &FrameSurfels, n_centers: usize) -> Self {
        let mut by_center = vec![Self::NONE; n_centers];
        for (i, &c) in new_surfels.centers.iter().enumerate() {
            by_center[c as usize] = i as u32;
        }
        Self { by_center }
    }

    #[inline]
    pub fn get(&self, center: usize) -> Option<usize> {
        match self.by_center.get(center) {
            Some(&i) if i != Self::NONE => Some(i as usize),
            _ => None,
        }
    }
}

/// Finds the new surfel corresponding to `local` (camera frame), if any.
pub fn associate(
    local: &Surfel,
    labels: &Image<u32>,
    lookup: &CenterLookup,
    new_surfels: &[Surfel],
    camera: &CameraModel,
    cfg: &FusionConfig,
) -> Option<usize> {
    let z = local.position.z;
    if !(z > 0.0) {
        return None;
    }
    let u = camera.project_unchecked(&local.position);
    let (px, py) = ((u.x + 0.5).floor(), (u.y + 0.5).floor());
    if !(px >= 0.0 && py >= 0.0 && px < camera.width as f64 && py < camera.height as f64) {
        return None;
    }
    let idx = lookup.get(labels.get(px as usize, py as usize) as usize)?;
    let cand = &new_surfels[idx];
    let depth_ok = (cand.position.z - z).abs() < depth_gate(z, camera, cfg);
    let normal_ok = cand.normal.dot(&local.normal) > cfg.normal_dot_min;
    (depth_ok && normal_ok).then_some(idx)
}

/// Merges `new` into `local` by weighted averaging of position and normal;
/// intensity and attached keyframe are taken from `new`.
pub fn fuse_pair(local: &Surfel, new: &Surfel) -> Surfel {
    let w = local.weight + new.weight;
    let position = (local.position * local.weight + new.position * new.weight) / w;
    let normal = local.normal * local.weight + new.normal * new.weight;
    let normal = normal.try_normalize(1e-12).unwrap_or(new.normal);
    Surfel {
        position,
        normal,
        intensity: new.intensity,
        weight: w,
        radius: local.radius.min(new.radius),
        update_count: local.update_count + 1,
        attached_keyframe: new.attached_keyframe,
    }
}

/// Outcome of fusing one frame.
#[derive(Debug, Clone, Default)]
pub struct FusionOutput {
    /// Kept local surfels (fused or not) followed by unmatched new surfels,
    /// all in the world frame.
    pub surfels: Vec<Surfel>,
    /// Which new surfels were merged into a local one.
    pub consumed: Vec<bool>,
    /// Local surfels removed by the outlier rule (world frame).
    pub pruned: Vec<Surfel>,
    pub fused: usize,
}

/// Fuses `new_surfels` (camera frame) into `local_surfels` (world frame).
///
/// Each local surfel fuses at most once and each new surfel at most once;
/// when two local surfels claim the same new surfel the earlier one wins.
/// Unfused local surfels are returned unchanged.
pub fn fuse_frame(
    local_surfels: Vec<Surfel>,
    new_surfels: &FrameSurfels,
    segmentation: &Segmentation,
    frame_pose: &Pose,
    reference: KeyframeId,
    camera: &CameraModel,
    cfg: &FusionConfig,
) -> FusionOutput {
    let lookup = CenterLookup::new(new_surfels, segmentation.centers.len());
    let world_to_cam = frame_pose.inverse();
    let mut consumed = vec![false; new_surfels.len()];
    let mut out = FusionOutput {
        surfels: Vec::with_capacity(local_surfels.len() + new_surfels.len()),
        ..Default::default()
    };

    for local in local_surfels {
        let in_cam = local.transformed(&world_to_cam);
        let matched = associate(
            &in_cam,
            &segmentation.labels,
            &lookup,
            &new_surfels.surfels,
            camera,
            cfg,
        )
        .filter(|&j| !consumed[j]);
        let result = match matched {
            Some(j) => {
                consumed[j] = true;
                out.fused += 1;
                fuse_pair(&in_cam, &new_surfels.surfels[j]).transformed(frame_pose)
            }
            None => local,
        };
        if cfg.should_prune(&result, reference) {
            out.pruned.push(result);
        } else {
            out.surfels.push(result);
        }
    }

    let mut leftovers: Vec<usize> = (0..new_surfels.len()).filter(|&j| !consumed[j]).collect();
    leftovers.sort_by_key(|&j| new_surfels.centers[j]);
    out.surfels
        .extend(leftovers.into_iter().map(|j| new_surfels.surfels[j].transformed(frame_pose)));
    out.consumed = consumed;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Frame;
    use crate::superpixel::{segment, SegmentationConfig};
    use crate::surfel_init::{initialize_surfels, pixel_normals};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn surfel(p: [f64; 3], n: [f64; 3], w: f64) -> Surfel {
        Surfel {
            position: Vector3::from(p),
            normal: Vector3::from(n).normalize(),
            intensity: 50.0,
            weight: w,
            radius: 0.05,
            update_count: 0,
            attached_keyframe: KeyframeId(0),
        }
    }

    fn camera() -> CameraModel {
        CameraModel::new(500.0, 500.0, 32.0, 24.0, 64, 48, 0.1, 1.0).unwrap()
    }

    /// A fronto-parallel plane at `z` with a textured intensity.
    fn plane_frame(cam: &CameraModel, z: f64, kf: u32) -> Frame {
        Frame::new(
            Image::from_fn(cam.width, cam.height, |x, y| ((x / 8 + y / 8) % 2) as f32 * 40.0 + 60.0),
            Image::filled(cam.width, cam.height, z),
            Pose::identity(),
            KeyframeId(kf),
            0,
        )
        .unwrap()
    }

    fn init(frame: &Frame, cam: &CameraModel) -> (Segmentation, FrameSurfels) {
        let cfg = SegmentationConfig::default();
        let seg = segment(frame, &cfg);
        let surfels = initialize_surfels(frame, &seg, &pixel_normals(frame, cam), &cfg, cam);
        (seg, surfels)
    }

    #[test]
    fn depth_gate_value() {
        let g = depth_gate(2.0, &camera(), &FusionConfig::default());
        assert_relative_eq!(g, 0.16, epsilon = 1e-12);
    }

    #[test]
    fn association_gates() {
        let cam = camera();
        let cfg = FusionConfig::default();
        let frame = plane_frame(&cam, 2.0, 0);
        let (seg, new) = init(&frame, &cam);
        let lookup = CenterLookup::new(&new, seg.centers.len());
        let target = new.surfels[5];

        let same = target;
        assert_eq!(associate(&same, &seg.labels, &lookup, &new.surfels, &cam, &cfg), Some(5));

        // Local surfel 0.2 m in front of the new one along the same ray:
        // |2.2 - 2.0| exceeds the 0.16 m gate computed at the local depth.
        let near = Surfel {
            position: target.position * (2.2 / target.position.z),
            ..target
        };
        let g = depth_gate(2.2, &cam, &cfg);
        assert!(0.2 > g);
        assert_eq!(associate(&near, &seg.labels, &lookup, &new.surfels, &cam, &cfg), None);
        let close = Surfel {
            position: target.position * (2.1 / target.position.z),
            ..target
        };
        assert_eq!(associate(&close, &seg.labels, &lookup, &new.surfels, &cam, &cfg), Some(5));

        let tilted = Surfel {
            normal: Vector3::new(0.0, 1.0, -1.0).normalize(),
            ..target
        };
        assert_eq!(associate(&tilted, &seg.labels, &lookup, &new.surfels, &cam, &cfg), None);

        let behind = Surfel {
            position: Vector3::new(0.0, 0.0, -1.0),
            ..target
        };
        assert_eq!(associate(&behind, &seg.labels, &lookup, &new.surfels, &cam, &cfg), None);
        let outside = Surfel {
            position: Vector3::new(10.0, 0.0, 2.0),
            ..target
        };
        assert_eq!(associate(&outside, &seg.labels, &lookup, &new.surfels, &cam, &cfg), None);
    }

    #[test]
    fn depth_gate_example_values() {
        // z_l = 2, b = 0.1, f = 500, sigma = 1: gate 0.16 m, so z_n = 2.2 fails.
        let cam = camera();
        let gate = depth_gate(2.0, &cam, &FusionConfig::default());
        assert!((2.2f64 - 2.0).abs() >= gate);
        assert!((2.1f64 - 2.0).abs() < gate);
    }

    #[test]
    fn fuse_pair_examples() {
        let a = surfel([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], 1.0);
        let b = Surfel {
            radius: 0.02,
            intensity: 99.0,
            attached_keyframe: KeyframeId(4),
            ..surfel([0.0, 0.0, 3.0], [0.0, 0.0, -1.0], 1.0)
        };
        let f = fuse_pair(&a, &b);
        assert_eq!(f.position, Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(f.weight, 2.0);
        assert_eq!(f.radius, 0.02);
        assert_eq!(f.update_count, 1);
        assert_eq!(f.intensity, 99.0);
        assert_eq!(f.attached_keyframe, KeyframeId(4));

        let a = surfel([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], 3.0);
        let b = surfel([0.0, 0.0, 4.0], [0.0, 0.0, -1.0], 1.0);
        assert_eq!(fuse_pair(&a, &b).position, Vector3::new(0.0, 0.0, 1.0));

        let tiny = surfel([0.0, 0.0, 4.0], [0.0, 1.0, -1.0], 1e-12);
        let f = fuse_pair(&a, &tiny);
        assert!((f.position - a.position).norm() < 1e-11);
        assert!((f.normal.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_local_passes_everything_through() {
        let cam = camera();
        let frame = plane_frame(&cam, 2.0, 0);
        let (seg, new) = init(&frame, &cam);
        let pose = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let out = fuse_frame(vec![], &new, &seg, &pose, KeyframeId(0), &cam, &FusionConfig::default());
        assert_eq!(out.surfels.len(), new.len());
        for (o, n) in out.surfels.iter().zip(&new.surfels) {
            assert_eq!(o.position, n.position + Vector3::new(1.0, 2.0, 3.0));
        }
        assert_eq!(out.fused, 0);
    }

    #[test]
    fn refusing_identical_frame() {
        let cam = camera();
        let frame = plane_frame(&cam, 2.0, 0);
        let (seg, new) = init(&frame, &cam);
        let pose = Pose::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), 0.4, Vector3::new(0.5, -1.0, 2.0));
        let cfg = FusionConfig::default();
        let first = fuse_frame(vec![], &new, &seg, &pose, KeyframeId(0), &cam, &cfg);
        let second = fuse_frame(first.surfels.clone(), &new, &seg, &pose, KeyframeId(0), &cam, &cfg);
        assert_eq!(second.surfels.len(), first.surfels.len());
        assert_eq!(second.fused, new.len());
        for (a, b) in first.surfels.iter().zip(&second.surfels) {
            assert_eq!(b.update_count, 1);
            assert_relative_eq!(b.weight, 2.0 * a.weight, max_relative = 1e-12);
            assert!((a.position - b.position).norm() < 1e-9);
            assert!((a.normal - b.normal).norm() < 1e-9);
        }
        // Third observation: still a fixed point.
        let third = fuse_frame(second.surfels.clone(), &new, &seg, &pose, KeyframeId(0), &cam, &cfg);
        for (a, b) in second.surfels.iter().zip(&third.surfels) {
            assert!((a.position - b.position).norm() < 1e-9);
            assert_eq!(b.update_count, 2);
        }
    }

    #[test]
    fn prune_boundary() {
        let cfg = FusionConfig::default();
        let mut s = surfel([0.0, 0.0, -5.0], [0.0, 0.0, 1.0], 1.0);
        s.update_count = 3;
        assert!(cfg.should_prune(&s, KeyframeId(12)));
        s.update_count = 5;
        assert!(!cfg.should_prune(&s, KeyframeId(12)));
        s.update_count = 4;
        assert!(!cfg.should_prune(&s, KeyframeId(10)));
        assert!(cfg.should_prune(&s, KeyframeId(11)));

        // Through fuse_frame: a surfel behind the camera is carried, or pruned.
        let cam = camera();
        let frame = plane_frame(&cam, 2.0, 12);
        let (seg, new) = init(&frame, &cam);
        s.update_count = 3;
        let out = fuse_frame(vec![s], &new, &seg, &Pose::identity(), KeyframeId(12), &cam, &cfg);
        assert_eq!(out.pruned, vec![s]);
        s.update_count = 5;
        let out = fuse_frame(vec![s], &new, &seg, &Pose::identity(), KeyframeId(12), &cam, &cfg);
        assert!(out.pruned.is_empty());
        assert_eq!(out.surfels[0], s);
    }

    #[test]
    fn first_local_surfel_wins() {
        let cam = camera();
        let frame = plane_frame(&cam, 2.0, 0);
        let (seg, new) = init(&frame, &cam);
        let a = new.surfels[3];
        let b = Surfel { weight: a.weight * 2.0, ..a };
        let out = fuse_frame(vec![a, b], &new, &seg, &Pose::identity(), KeyframeId(0), &cam, &FusionConfig::default());
        assert_eq!(out.fused, 1);
        assert_eq!(out.surfels[0].update_count, 1);
        assert_eq!(out.surfels[1], b);
    }

    fn noisy_scene(seed: u64) -> (CameraModel, Frame, Vec<Surfel>) {
        use rand::{Rng, SeedableRng};
        let cam = camera();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let depth = Image::from_fn(cam.width, cam.height, |x, _| 2.0 + x as f64 * 0.002);
        let frame = Frame::new(
            Image::from_fn(cam.width, cam.height, |x, y| ((x * 3 + y * 5) % 50) as f32),
            depth,
            Pose::identity(),
            KeyframeId(20),
            0,
        )
        .unwrap();
        let local = (0..120)
            .map(|_| Surfel {
                update_count: rng.random_range(0..8),
                attached_keyframe: KeyframeId(rng.random_range(0..30)),
                weight: rng.random_range(0.5..100.0),
                ..surfel(
                    [rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1), rng.random_range(1.9..2.2)],
                    [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0],
                    1.0,
                )
            })
            .collect();
        (cam, frame, local)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weight_is_conserved(seed in any::<u64>()) {
            let (cam, frame, local) = noisy_scene(seed);
            let (seg, new) = init(&frame, &cam);
            let out = fuse_frame(local.clone(), &new, &seg, &Pose::identity(), KeyframeId(20), &cam, &FusionConfig::default());
            let w_in: f64 = local.iter().map(|s| s.weight).sum::<f64>() + new.surfels.iter().map(|s| s.weight).sum::<f64>();
            let w_out: f64 = out.surfels.iter().map(|s| s.weight).sum();
            let w_pruned: f64 = out.pruned.iter().map(|s| s.weight).sum();
            prop_assert!((w_out - (w_in - w_pruned)).abs() <= 1e-9 * w_in);
            prop_assert!(out.fused > 0);
        }

        #[test]
        fn fused_position_between_parents(seed in any::<u64>()) {
            let (cam, frame, local) = noisy_scene(seed);
            let (seg, new) = init(&frame, &cam);
            let lookup = CenterLookup::new(&new, seg.centers.len());
            let cfg = FusionConfig::default();
            for l in &local {
                if let Some(j) = associate(l, &seg.labels, &lookup, &new.surfels, &cam, &cfg) {
                    let n = &new.surfels[j];
                    let f = fuse_pair(l, n);
                    let seg_dir = n.position - l.position;
                    let t = (f.position - l.position).dot(&seg_dir) / seg_dir.norm_squared();
                    prop_assert!((-1e-9..=1.0 + 1e-9).contains(&t));
                    prop_assert!((l.position + seg_dir * t - f.position).norm() < 1e-9);
                    prop_assert!((f.position.z - l.position.z).abs() < depth_gate(l.position.z, &cam, &cfg));
                    prop_assert!((f.normal.norm() - 1.0).abs() < 1e-12);
                    prop_assert_eq!(f.update_count, l.update_count + 1);
                }
            }
        }

        #[test]
        fn new_surfel_order_does_not_matter(seed in any::<u64>(), rot in 1usize..50) {
            let (cam, frame, local) = noisy_scene(seed);
            let (seg, new) = init(&frame, &cam);
            let mut shuffled = new.clone();
            let r = rot % new.len();
            shuffled.surfels.rotate_left(r);
            shuffled.centers.rotate_left(r);
            let cfg = FusionConfig::default();
            let a = fuse_frame(local.clone(), &new, &seg, &Pose::identity(), KeyframeId(20), &cam, &cfg);
            let b = fuse_frame(local, &shuffled, &seg, &Pose::identity(), KeyframeId(20), &cam, &cfg);
            prop_assert_eq!(a.surfels, b.surfels);
            prop_assert_eq!(a.pruned, b.pruned);
        }
    }
}
