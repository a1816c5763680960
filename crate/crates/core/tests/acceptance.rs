//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; exits non-zero if any fails.

use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use surfel_core::dataset_io::{
    load_sequence, load_track_events, load_tum_trajectory, synthesize_keyframes, trajectory_to_events, KeyframePolicy,
    TrackEvent,
};
use surfel_core::evaluation::{
    render_scene, score_accuracy, GroundTruth, Pattern, PointCloudIndex, Primitive, RenderNoise, Stage,
    SyntheticScene,
};
use surfel_core::fusion::{fuse_frame, fuse_pair, FusionConfig};
use surfel_core::pipeline::{benchmark, run, BenchmarkOptions, Mapper, PipelineConfig, Profile};
use surfel_core::ply::{read_points, read_surfels, write_surfels};
use surfel_core::pose_graph::{GraphUpdate, MapDatabase, PoseGraph};
use surfel_core::superpixel::{robust_mean_depth, segment};
use surfel_core::surfel_init::{fit_plane, initialize_surfels, pixel_normals, FrameSurfels};
use surfel_core::{CameraModel, Frame, KeyframeId, Pose, Surfel};

type Outcome = Result<String, String>;

/// Marks an outcome that could not run here; it neither passes nor fails.
const SKIPPED: &str = "skipped: ";

/// Failures show up in the criterion line; nothing is persisted to disk.
fn test_runner(cases: u32) -> TestRunner {
    TestRunner::new(RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    })
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_camera(baseline: f64) -> CameraModel {
    CameraModel::new(131.25, 131.25, 79.5, 59.5, 160, 120, baseline, 1.0).unwrap()
}

fn checker(size: f64) -> Pattern {
    Pattern::Checker {
        size,
        dark: 40.0,
        light: 200.0,
    }
}

fn cells(seed: u64) -> Pattern {
    Pattern::Cells {
        size: 0.2,
        lo: 30.0,
        hi: 220.0,
        seed,
    }
}

/// Back wall, floor and a box.
fn room() -> SyntheticScene {
    SyntheticScene::new(vec![
        Primitive::plane(Vector3::z(), 4.0, cells(1)),
        Primitive::plane(Vector3::y(), 1.2, cells(2)),
        Primitive::cuboid(Vector3::new(-0.6, 0.2, 2.2), Vector3::new(0.3, 1.2, 2.8), cells(3)),
    ])
    .unwrap()
}

fn render(scene: &SyntheticScene, ev: &TrackEvent, gt: &Pose, cam: &CameraModel, noise: RenderNoise) -> Frame {
    let mut f = render_scene(scene, gt, cam, &noise).unwrap();
    f.frame_index = ev.frame_index;
    f.ref_keyframe = ev.ref_keyframe;
    f.pose = ev.camera_pose();
    f
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Minimizer of a convex function on `[lo, hi]` by ternary search.
fn ternary(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    for _ in 0..iters {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

fn tangent(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = n.cross(&helper).normalize();
    (t1, n.cross(&t1))
}

// 1. Noise-free plane: surfels land on the surface and satisfy both
// initialization constraints exactly.
fn exactness() -> Outcome {
    let start = Instant::now();
    let normal = Vector3::new(0.15, -0.1, 1.0).normalize();
    let scene = SyntheticScene::new(vec![Primitive::plane(normal, 2.2, checker(0.4))]).unwrap();
    let cam = small_camera(0.1);
    let gt: Vec<(usize, Pose)> = (0..5)
        .map(|i| {
            let f = i as f64;
            (i, Pose::from_axis_angle(&Vector3::y(), 0.02 * f, Vector3::new(0.05 * f, 0.02 * f, 0.0)))
        })
        .collect();
    let config = PipelineConfig::default();
    let (seg_cfg, rcam) = config.resolve(&cam);
    let mut mapper = Mapper::new(&cam, config).map_err(|e| e.to_string())?;
    let (mut worst_plane, mut worst_reproj, mut checked) = (0.0f64, 0.0f64, 0usize);
    for ev in synthesize_keyframes(&gt, &KeyframePolicy::default()) {
        let frame = render(&scene, &ev, &gt[ev.frame_index].1, &cam, RenderNoise::default());
        let seg = segment(&frame, &seg_cfg);
        let members = seg.members();
        let fs = initialize_surfels(&frame, &seg, &pixel_normals(&frame, &rcam), &seg_cfg, &rcam);
        for (s, &c) in fs.surfels.iter().zip(&fs.centers) {
            let center = &seg.centers[c as usize];
            let px = rcam.project(&s.position).map_err(|e| e.to_string())?;
            worst_reproj = worst_reproj.max((px - Vector2::new(center.x, center.y)).norm());
            // Plane through the member points with the surfel's normal.
            let pts: Vec<Vector3<f64>> = members
                .of(c as usize)
                .iter()
                .filter_map(|&p| {
                    let (x, y) = (p as usize % frame.width(), p as usize / frame.width());
                    frame.depth.depth(x, y).map(|d| rcam.ray(x as f64, y as f64) * d)
                })
                .collect();
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            worst_plane = worst_plane.max(s.normal.dot(&(s.position - mean)).abs());
            checked += 1;
        }
        mapper.process(&frame, ev.graph_update().as_ref()).map_err(|e| e.to_string())?;
    }
    let report = score_accuracy(mapper.map().iter(), GroundTruth::Scene(&scene)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        report.mean_error < 1e-6 && worst_plane < 1e-9 && worst_reproj < 1e-6 && checked > 0 && secs < 5.0,
        format!(
            "mean error {:.2e} m over {} surfels, plane residual {worst_plane:.2e}, reprojection {worst_reproj:.2e} px on {checked} initial surfels, {secs:.2} s",
            report.mean_error, report.surfel_count
        ),
    )
}

// 2. Robust depth and plane fit against brute-force minimizers.
fn robust_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_depth, mut worst_angle) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        // Depth: inliers around a base depth plus far outliers.
        let n = rng.random_range(5..=64);
        let base = rng.random_range(0.5..4.0);
        let delta = [0.02, 0.05, 0.5][rng.random_range(0..3)];
        let noise = Normal::new(0.0, 0.01).unwrap();
        let outlier_rate = rng.random_range(0.0..0.3);
        let depths: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < outlier_rate {
                    base + rng.random_range(-0.5..0.5)
                } else {
                    base + noise.sample(&mut rng)
                }
            })
            .collect();
        let cost = |d: f64| depths.iter().map(|&x| huber(x - d, delta)).sum::<f64>();
        let (lo, hi) = depths.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let grid = (0..=steps)
            .map(|k| lo + k as f64 * h)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap();
        let oracle = ternary(cost, grid - h, grid + h, 100);
        let est = robust_mean_depth(&depths, delta).map_err(|e| e.to_string())?;
        worst_depth = worst_depth.max((est - oracle).abs());
    }

    // Plane: a noisy disk facing the camera with outliers off the plane.
    // Instances whose global minimizer is not the generating plane are
    // ill-posed and replaced; they are counted in the report.
    let (mut accepted, mut ill_posed) = (0, 0);
    while accepted < 50 {
        let n0 = loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0).normalize();
            if v.z < -0.5 {
                break v;
            }
        };
        let center = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..3.0));
        let (t1, t2) = tangent(&n0);
        // A superpixel needs more than 16 members to be fitted.
        let m = rng.random_range(17..=64);
        let radius = rng.random_range(0.2..0.4);
        let off = Normal::new(0.0, 0.004).unwrap();
        let outlier_rate = rng.random_range(0.0..0.15);
        let points: Vec<Vector3<f64>> = (0..m)
            .map(|_| {
                let (r, a) = (radius * rng.random::<f64>().sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
                let along = if rng.random::<f64>() < outlier_rate {
                    rng.random_range(0.1..0.3) * if rng.random::<bool>() { 1.0 } else { -1.0 }
                } else {
                    off.sample(&mut rng)
                };
                center + t1 * (r * a.cos()) + t2 * (r * a.sin()) + n0 * along
            })
            .collect();
        let plane_delta = 0.05;
        let tilt = Vector3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), 0.0);
        let fit = fit_plane(&points, &(n0 + tilt), plane_delta).map_err(|e| e.to_string())?;

        let mean = points.iter().sum::<Vector3<f64>>() / m as f64;
        let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - mean).collect();
        let reach = centered.iter().map(|q| q.norm()).fold(0.0, f64::max) + 1.0;
        let profile = |n: &Vector3<f64>| {
            let c = |b: f64| centered.iter().map(|q| huber(n.dot(q) + b, plane_delta)).sum::<f64>();
            let b = ternary(c, -reach, reach, 80);
            c(b)
        };
        // Coarse pass over a Fibonacci sphere, then shrinking local grids.
        let count = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut best = (0..count)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .map(|n| (profile(&n), n))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        for scale_deg in [4.0f64, 1.0, 0.25, 0.06, 0.015] {
            let (u, v) = tangent(&best.1);
            let s = scale_deg.to_radians() / 5.0;
            let centre = best.1;
            for a in -5..=5 {
                for b in -5..=5 {
                    let n = (centre + u * (a as f64 * s) + v * (b as f64 * s)).normalize();
                    let c = profile(&n);
                    if c < best.0 {
                        best = (c, n);
                    }
                }
            }
        }
        if n0.dot(&best.1).abs().min(1.0).acos().to_degrees() > 10.0 {
            ill_posed += 1;
            continue;
        }
        accepted += 1;
        let angle = fit.normal.dot(&best.1).abs().min(1.0).acos().to_degrees();
        worst_angle = worst_angle.max(angle);
    }
    ensure(
        worst_depth < 1e-3 && worst_angle < 2.0,
        format!(
            "50 + 50 instances: worst depth gap {worst_depth:.2e} m, worst normal gap {worst_angle:.3} deg ({ill_posed} ill-posed plane draws replaced)"
        ),
    )
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

// 3. Fusing 16 noisy views of a static plane shrinks depth variance ~16x.
fn variance_reduction() -> Outcome {
    const N: usize = 16;
    let scene = SyntheticScene::new(vec![Primitive::plane(Vector3::z(), 2.0, checker(0.4))]).unwrap();
    let cam = small_camera(2.0);
    let config = PipelineConfig::default();
    let (seg_cfg, rcam) = config.resolve(&cam);
    let mut mapper = Mapper::new(&cam, config).map_err(|e| e.to_string())?;
    let mut single = Vec::new();
    for i in 0..N {
        let mut frame = render_scene(&scene, &Pose::identity(), &cam, &RenderNoise::disparity(1.0, 100 + i as u64))
            .map_err(|e| e.to_string())?;
        frame.frame_index = i;
        let seg = segment(&frame, &seg_cfg);
        let fs = initialize_surfels(&frame, &seg, &pixel_normals(&frame, &rcam), &seg_cfg, &rcam);
        single.extend(fs.surfels.iter().map(|s| s.position.z));
        let update = (i == 0).then(|| GraphUpdate {
            new_keyframes: vec![(KeyframeId(0), Pose::identity())],
            ..Default::default()
        });
        mapper.process(&frame, update.as_ref()).map_err(|e| e.to_string())?;
    }
    let fused: Vec<f64> = mapper
        .map()
        .iter()
        .filter(|s| s.update_count as usize == N - 1)
        .map(|s| s.position.z)
        .collect();
    if fused.len() < 20 {
        return Err(format!("only {} surfels observed in all {N} frames", fused.len()));
    }
    let ratio = variance(&single) / variance(&fused);
    ensure(
        (8.0..=24.0).contains(&ratio),
        format!(
            "variance ratio {ratio:.2} (single {:.3e} m^2 over {} surfels, fused {:.3e} m^2 over {})",
            variance(&single),
            single.len(),
            variance(&fused),
            fused.len()
        ),
    )
}

// 4 and 6 share the loop-scene runs.
struct LoopRuns {
    with_edges: surfel_core::pipeline::BenchmarkReport,
    without_edges: surfel_core::pipeline::BenchmarkReport,
    secs_with: f64,
}

fn loop_runs() -> Result<LoopRuns, String> {
    let options = BenchmarkOptions::default();
    let t = Instant::now();
    let with_edges = benchmark(&options, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let secs_with = t.elapsed().as_secs_f64();
    let mut config = PipelineConfig::default();
    config.keyframes.proximity_edges = false;
    let without_edges = benchmark(&options, &config).map_err(|e| e.to_string())?;
    Ok(LoopRuns {
        with_edges,
        without_edges,
        secs_with,
    })
}

fn constant_time(runs: &LoopRuns) -> Outcome {
    let r = &runs.with_edges;
    let (ratio, growth) = r
        .fuse_ratio()
        .zip(r.count_growth)
        .ok_or("loop scene too short to probe frames 100 and 1000")?;
    ensure(
        ratio <= 1.5 && growth >= 5.0 && runs.secs_with < 300.0,
        format!(
            "fuse median {:.4} ms at frame 100, {:.4} ms at frame 1000 (ratio {ratio:.3}), map growth {growth:.2}x, {:.1} s",
            r.early_fuse_ms.unwrap(),
            r.late_fuse_ms.unwrap(),
            runs.secs_with
        ),
    )
}

fn plateau(runs: &LoopRuns) -> Outcome {
    let with = runs.with_edges.revisit_growth().ok_or("no revisit segment")?;
    let without = runs.without_edges.revisit_growth().ok_or("no revisit segment")?;
    ensure(
        with <= 0.10 && without >= 0.50,
        format!(
            "revisit growth {:.1}% with loop edges (from {} surfels), {:.1}% without",
            100.0 * with,
            runs.with_edges.revisit_start_count.unwrap(),
            100.0 * without
        ),
    )
}

// 5. Throughput at 640x480.
fn throughput() -> Outcome {
    let cam = CameraModel::new(525.0, 525.0, 319.5, 239.5, 640, 480, 0.1, 1.0).unwrap();
    let scene = room();
    let gt: Vec<(usize, Pose)> = (0..30)
        .map(|i| (i, Pose::from_translation(Vector3::new(0.01 * i as f64, 0.0, 0.0))))
        .collect();
    let mut mapper = Mapper::new(&cam, PipelineConfig::default()).map_err(|e| e.to_string())?;
    for ev in synthesize_keyframes(&gt, &KeyframePolicy::default()) {
        let noise = RenderNoise::disparity(0.5, ev.frame_index as u64);
        let frame = render(&scene, &ev, &gt[ev.frame_index].1, &cam, noise);
        mapper.process(&frame, ev.graph_update().as_ref()).map_err(|e| e.to_string())?;
    }
    let perf = mapper.perf();
    let total = perf.total_mean().unwrap();
    let fuse = perf.stage_mean(Stage::Fuse).unwrap();
    ensure(
        total <= 100.0 && fuse <= 6.0,
        format!(
            "{} frames: {total:.1} ms/frame average, fuse {fuse:.2} ms, superpixel {:.1} ms, {} surfels",
            perf.len(),
            perf.stage_mean(Stage::Superpixel).unwrap(),
            mapper.map().len()
        ),
    )
}

fn random_pose(rng: &mut impl Rng, angle: f64, shift: f64) -> Pose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(
        rng.random_range(-shift..shift),
        rng.random_range(-shift..shift),
        rng.random_range(-shift..shift),
    );
    Pose::from_axis_angle(&axis, rng.random_range(-angle..angle), t)
}

fn max_surfel_gap(a: &[Surfel], b: &[Surfel]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.position - y.position).amax().max((x.normal - y.normal).amax()))
        .fold(0.0, f64::max)
}

// 7. Correcting drifted keyframes reproduces the ground-truth map.
fn deformation() -> Outcome {
    let cam = small_camera(0.1);
    let scene = room();
    let gt: Vec<(usize, Pose)> = (0..14)
        .map(|i| {
            let f = i as f64;
            (i, Pose::from_axis_angle(&Vector3::y(), -0.01 * f, Vector3::new(0.09 * f, 0.0, 0.01 * f)))
        })
        .collect();
    let events = synthesize_keyframes(&gt, &KeyframePolicy::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let drift: Vec<Pose> = (0..events.len()).map(|_| random_pose(&mut rng, 0.05, 0.05)).collect();
    let config = PipelineConfig {
        hop_threshold: 1,
        ..Default::default()
    };
    let mut truth = Mapper::new(&cam, config.clone()).map_err(|e| e.to_string())?;
    let mut drifted = Mapper::new(&cam, config).map_err(|e| e.to_string())?;
    let mut keyframe_truth = Vec::new();
    for ev in &events {
        let frame = render(&scene, ev, &gt[ev.frame_index].1, &cam, RenderNoise::disparity(0.5, ev.frame_index as u64));
        let update = ev.graph_update();
        truth.process(&frame, update.as_ref()).map_err(|e| e.to_string())?;

        let d = |k: KeyframeId| drift[k.0 as usize];
        let mut bad = frame.clone();
        bad.pose = d(frame.ref_keyframe) * frame.pose;
        let bad_update = update.map(|u| {
            keyframe_truth.extend(u.new_keyframes.iter().copied());
            GraphUpdate {
                new_keyframes: u.new_keyframes.iter().map(|&(k, p)| (k, d(k) * p)).collect(),
                ..u
            }
        });
        drifted.process(&bad, bad_update.as_ref()).map_err(|e| e.to_string())?;
    }
    drifted
        .apply_update(&GraphUpdate {
            corrections: keyframe_truth.clone(),
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
    let (a, b) = (truth.map().to_vec(), drifted.map().to_vec());
    let gap = max_surfel_gap(&a, &b);
    let same_shape = a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|(x, y)| x.attached_keyframe == y.attached_keyframe && x.update_count == y.update_count);
    if !(same_shape && gap < 1e-6) {
        return Err(format!("{} vs {} surfels, max gap {gap:.2e}", a.len(), b.len()));
    }

    // Group action and idempotence over random graphs.
    let mut runner = test_runner(100);
    let strategy = (1u32..10, any::<u64>());
    runner
        .run(&strategy, |(n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = PoseGraph::new(rng.random_range(1..4)).unwrap();
            let start: Vec<(KeyframeId, Pose)> = (0..n).map(|k| (KeyframeId(k), random_pose(&mut rng, 1.0, 2.0))).collect();
            let edges = (0..2 * n)
                .map(|_| (KeyframeId(rng.random_range(0..n)), KeyframeId(rng.random_range(0..n))))
                .filter(|(a, b)| a != b)
                .collect();
            g.apply_update(&GraphUpdate {
                new_keyframes: start.clone(),
                new_edges: edges,
                corrections: vec![],
            })
            .unwrap();
            let surfels: Vec<Surfel> = (0..5 * n)
                .map(|i| Surfel {
                    position: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..5.0)),
                    normal: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0).normalize(),
                    intensity: 100.0,
                    weight: 1.0,
                    radius: 0.01,
                    update_count: 0,
                    attached_keyframe: KeyframeId(i % n),
                })
                .collect();
            let mut m = MapDatabase::new();
            m.insert_surfels(&g, surfels).unwrap();
            let original = m.to_vec();
            let correct = |g: &mut PoseGraph, poses: &[(KeyframeId, Pose)]| {
                g.apply_update(&GraphUpdate {
                    corrections: poses.to_vec(),
                    ..Default::default()
                })
                .unwrap();
            };
            let shuffled: Vec<(KeyframeId, Pose)> = (0..n).map(|k| (KeyframeId(k), random_pose(&mut rng, 1.0, 2.0))).collect();
            correct(&mut g, &shuffled);
            m.deform(&mut g);
            let once = m.clone();
            m.deform(&mut g);
            prop_assert_eq!(&m, &once);
            correct(&mut g, &start);
            m.deform(&mut g);
            prop_assert!(max_surfel_gap(&m.to_vec(), &original) < 1e-9);
            Ok(())
        })
        .map_err(|e| format!("pose-graph property: {e}"))?;
    Ok(format!(
        "{} surfels match the ground-truth map to {gap:.2e} m after correcting {} keyframes; 100 random graphs pass",
        a.len(),
        keyframe_truth.len()
    ))
}

// 8. Optional real-data check.
fn icl_nuim() -> Outcome {
    let Some(dir) = std::env::var_os("ICL_NUIM_KT0") else {
        return Ok(format!("{SKIPPED}set ICL_NUIM_KT0 to a directory with manifest.txt, camera.txt, events.txt or trajectory.txt, reference.ply"));
    };
    let dir = Path::new(&dir);
    let config = PipelineConfig {
        profile: Some(Profile::Icl),
        ..Default::default()
    };
    let seq = load_sequence(&dir.join("manifest.txt"), &dir.join("camera.txt")).map_err(|e| e.to_string())?;
    let events = if dir.join("events.txt").exists() {
        load_track_events(&dir.join("events.txt"), &config.keyframes).map_err(|e| e.to_string())?
    } else {
        let stamps: Vec<f64> = seq.entries.iter().map(|e| e.timestamp).collect();
        let traj = load_tum_trajectory(&dir.join("trajectory.txt")).map_err(|e| e.to_string())?;
        trajectory_to_events(&stamps, &traj, 0.02, &config.keyframes)
    };
    let out = run(&seq, &events, &config).map_err(|e| e.to_string())?;
    let cloud = PointCloudIndex::new(read_points(&dir.join("reference.ply")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let report = score_accuracy(out.map.iter(), GroundTruth::Cloud(&cloud)).map_err(|e| e.to_string())?;
    ensure(
        report.mean_error <= 0.015,
        format!("mean error {:.3} cm over {} surfels", report.mean_error * 100.0, report.surfel_count),
    )
}

fn small_run(frames: usize) -> (Mapper, Vec<TrackEvent>, Vec<Frame>) {
    let cam = small_camera(0.1);
    let scene = room();
    let gt: Vec<(usize, Pose)> = (0..frames)
        .map(|i| (i, Pose::from_translation(Vector3::new(0.03 * i as f64, 0.0, 0.0))))
        .collect();
    let mapper = Mapper::new(&cam, PipelineConfig::default()).unwrap();
    let events = synthesize_keyframes(&gt, &KeyframePolicy::default());
    let frames = events
        .iter()
        .map(|ev| render(&scene, ev, &gt[ev.frame_index].1, &cam, RenderNoise::disparity(0.5, ev.frame_index as u64)))
        .collect();
    (mapper, events, frames)
}

fn ply_bytes(surfels: &[Surfel]) -> Vec<u8> {
    let mut out = Vec::new();
    write_surfels(&mut out, surfels.iter()).unwrap();
    out
}

// 9. Cross-module invariants.
fn invariants() -> Outcome {
    let mut passed = Vec::new();

    // Weight conservation through a real run: nothing is pruned in a short
    // sequence, so total weight grows by exactly the new surfels' weight.
    let (mut mapper, events, frames) = small_run(8);
    let config = PipelineConfig::default();
    let (seg_cfg, cam) = config.resolve(mapper.camera());
    for (frame, ev) in frames.iter().zip(&events) {
        let before: f64 = mapper.map().iter().map(|s| s.weight).sum();
        let seg = segment(frame, &seg_cfg);
        let added: f64 = initialize_surfels(frame, &seg, &pixel_normals(frame, &cam), &seg_cfg, &cam)
            .surfels
            .iter()
            .map(|s| s.weight)
            .sum();
        let rec = mapper.process(frame, ev.graph_update().as_ref()).map_err(|e| e.to_string())?;
        let after: f64 = mapper.map().iter().map(|s| s.weight).sum();
        if rec.pruned_count != 0 || (after - before - added).abs() > 1e-9 * after {
            return Err(format!("weight conservation: frame {} {before} + {added} != {after}", frame.frame_index));
        }
    }
    passed.push("weight conservation");

    // Association does not depend on the order of the new surfels.
    let frame = &frames[3];
    let mut replay = Mapper::new(&cam, PipelineConfig::default()).unwrap();
    for (f, ev) in frames.iter().zip(&events).take(3) {
        replay.process(f, ev.graph_update().as_ref()).unwrap();
    }
    let local: Vec<Surfel> = replay.map().to_vec();
    let seg = segment(frame, &seg_cfg);
    let new = initialize_surfels(frame, &seg, &pixel_normals(frame, &cam), &seg_cfg, &cam);
    let fcfg = FusionConfig::default();
    let base = fuse_frame(local.clone(), &new, &seg, &frame.pose, frame.ref_keyframe, &cam, &fcfg);
    for rot in 1..new.len() {
        let mut perm = FrameSurfels {
            surfels: new.surfels.clone(),
            centers: new.centers.clone(),
            skipped: new.skipped,
        };
        perm.surfels.rotate_left(rot);
        perm.centers.rotate_left(rot);
        let other = fuse_frame(local.clone(), &perm, &seg, &frame.pose, frame.ref_keyframe, &cam, &fcfg);
        if other.surfels != base.surfels || other.pruned != base.pruned {
            return Err(format!("association order: rotation by {rot} changed the result"));
        }
    }
    if base.fused == 0 {
        return Err("association order: nothing fused".into());
    }
    passed.push("association order-independence");

    // Hop-limited sets only grow when edges are added.
    let mut runner = test_runner(200);
    runner
        .run(&(2u32..20, any::<u64>(), 1u32..5), |(n, seed, hops)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = PoseGraph::new(hops).unwrap();
            g.apply_update(&GraphUpdate {
                new_keyframes: (0..n).map(|k| (KeyframeId(k), Pose::identity())).collect(),
                ..Default::default()
            })
            .unwrap();
            let reference = KeyframeId(rng.random_range(0..n));
            let mut prev = g.locally_consistent_keyframes(reference).unwrap();
            for _ in 0..2 * n {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                if a == b {
                    continue;
                }
                g.apply_update(&GraphUpdate {
                    new_edges: vec![(KeyframeId(a), KeyframeId(b))],
                    ..Default::default()
                })
                .unwrap();
                let next = g.locally_consistent_keyframes(reference).unwrap();
                prop_assert!(prev.iter().all(|k| next.contains(k)));
                prop_assert!(next.contains(&reference));
                prev = next;
            }
            Ok(())
        })
        .map_err(|e| format!("BFS monotonicity: {e}"))?;
    passed.push("BFS monotonicity");

    // PLY export -> import -> export is byte-identical.
    let mut runner = test_runner(100);
    let float = -1e3f32..1e3f32;
    let surfel = (
        prop::array::uniform3(float.clone()),
        prop::array::uniform3(-1.0f32..1.0),
        0f32..255.0,
        0f32..1.0,
        0f32..1e6,
        any::<u32>(),
        any::<u32>(),
    )
        .prop_map(|(p, n, i, r, w, u, k)| Surfel {
            position: Vector3::from(p).cast(),
            normal: Vector3::from(n).cast(),
            intensity: i as f64,
            radius: r as f64,
            weight: w as f64,
            update_count: u,
            attached_keyframe: KeyframeId(k),
        });
    runner
        .run(&prop::collection::vec(surfel, 0..50), |surfels| {
            let first = ply_bytes(&surfels);
            let back = read_surfels(BufReader::new(first.as_slice())).unwrap();
            prop_assert_eq!(back.len(), surfels.len());
            prop_assert_eq!(ply_bytes(&back), first);
            Ok(())
        })
        .map_err(|e| format!("PLY round trip: {e}"))?;
    passed.push("PLY round trip");

    // Identical inputs give bit-identical maps.
    let replay = |frames: &[Frame]| {
        let mut m = Mapper::new(&cam, PipelineConfig::default()).unwrap();
        for (f, ev) in frames.iter().zip(&events) {
            m.process(f, ev.graph_update().as_ref()).unwrap();
        }
        ply_bytes(&m.map().to_vec())
    };
    let first = replay(&frames);
    if first != replay(&frames) || first != ply_bytes(&mapper.map().to_vec()) {
        return Err("end-to-end determinism: maps differ".into());
    }
    passed.push("end-to-end determinism");

    // Fusing with a unit-weight copy doubles the weight.
    let s = mapper.map().iter().next().copied().ok_or("empty map")?;
    let f = fuse_pair(&s, &s);
    if f.weight != 2.0 * s.weight || f.update_count != s.update_count + 1 {
        return Err("fuse_pair weight".into());
    }
    Ok(passed.join(", "))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => match d.strip_prefix(SKIPPED) {
                Some(why) => println!("criterion {id} [{name}]: SKIPPED ({why})"),
                None => println!("criterion {id} [{name}]: PASS ({d}) [{secs:.1} s]"),
            },
            Err(d) => {
                failures += 1;
                println!("criterion {id} [{name}]: FAIL ({d}) [{secs:.1} s]");
            }
        }
    };
    report(1, "exactness chain", &mut exactness);
    report(2, "robust-estimator oracles", &mut robust_oracles);
    report(3, "variance reduction", &mut variance_reduction);
    let runs = loop_runs();
    report(4, "constant-time fusion", &mut || constant_time(runs.as_ref().map_err(Clone::clone)?));
    report(5, "per-frame throughput", &mut throughput);
    report(6, "memory plateau", &mut || plateau(runs.as_ref().map_err(Clone::clone)?));
    report(7, "deformation correctness", &mut deformation);
    report(8, "ICL-NUIM spot check", &mut icl_nuim);
    report(9, "invariant suites", &mut invariants);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
