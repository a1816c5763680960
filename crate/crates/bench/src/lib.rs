//! Shared fixtures for the benchmarks.

use nalgebra::Vector3;
use surfel_core::evaluation::{render_scene, Pattern, Primitive, RenderNoise, SyntheticScene};
use surfel_core::{CameraModel, Frame, Pose};

/// 640x480 camera with ICL-NUIM-like intrinsics.
pub fn vga_camera() -> CameraModel {
    CameraModel::new(525.0, 525.0, 319.5, 239.5, 640, 480, 0.1, 1.0).expect("valid camera")
}

/// A room corner: back wall, floor and a box, with cell texture.
pub fn room() -> SyntheticScene {
    let tex = |seed| Pattern::Cells { size: 0.2, lo: 30.0, hi: 220.0, seed };
    SyntheticScene::new(vec![
        Primitive::plane(Vector3::z(), 4.0, tex(1)),
        Primitive::plane(Vector3::y(), 1.2, tex(2)),
        Primitive::cuboid(Vector3::new(-0.6, 0.2, 2.2), Vector3::new(0.3, 1.2, 2.8), tex(3)),
    ])
    .expect("non-empty scene")
}

/// Frame `i` of a slow sideways pan through [`room`].
pub fn frame(i: usize, noise: f64) -> Frame {
    let pose = Pose::from_translation(Vector3::new(0.01 * i as f64, 0.0, 0.0));
    let mut f = render_scene(&room(), &pose, &vga_camera(), &RenderNoise::disparity(noise, i as u64)).expect("renders");
    f.frame_index = i;
    f
}
