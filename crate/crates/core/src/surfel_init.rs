//! Surfel initialization from superpixels.
//!
//! Each eligible superpixel yields one surfel: its member pixels are
//! back-projected, a plane is fitted to them under a Huber loss, and the
//! surfel is placed where the superpixel's center ray meets that plane.
//! Radius is chosen so the disk covers the superpixel in the image and the
//! weight is the inverse variance of the depth under the disparity model.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::frame::{is_valid_depth, Frame, Image};
use crate::superpixel::{Segmentation, SegmentationConfig};
use crate::surfel::Surfel;

const PLANE_STEP_TOL: f64 = 1e-6;
const PLANE_MAX_ITERS: usize = 10;
const GRAZING_TOL: f64 = 1e-6;
/// Relative threshold on the second covariance eigenvalue below which a
/// point set is treated as collinear.
const COLLINEAR_TOL: f64 = 1e-12;

/// Per-pixel normals; `None` where depth or any 4-neighbour depth is missing.
pub type NormalMap = Image<Option<Vector3<f64>>>;

/// Result of robust plane fitting in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    /// Unit normal facing the camera.
    pub normal: Vector3<f64>,
    /// Offset: the plane is `normal . (p - mean_point) + bias = 0`.
    pub bias: f64,
    pub mean_point: Vector3<f64>,
    /// Points whose residual is within the Huber radius.
    pub inlier_count: usize,
}

impl PlaneFit {
    #[inline]
    pub fn residual(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.mean_point)) + self.bias
    }
}

/// Why a superpixel did not produce a surfel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub too_small: usize,
    pub no_depth: usize,
    pub too_few_points: usize,
    pub degenerate: usize,
    pub grazing: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.too_small + self.no_depth + self.too_few_points + self.degenerate + self.grazing
    }
}

/// Surfels initialized from one frame, in the camera frame.
#[derive(Debug, Clone, Default)]
pub struct FrameSurfels {
    pub surfels: Vec<Surfel>,
    /// Superpixel (center index) each surfel was initialized from.
    pub centers: Vec<u32>,
    pub skipped: SkipCounts,
}

impl FrameSurfels {
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }
}

#[inline]
fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Normals from central differences of back-projected neighbours, oriented
/// towards the camera.
pub fn pixel_normals(frame: &Frame, camera: &CameraModel) -> NormalMap {
    let (w, h) = (frame.width(), frame.height());
    let depth = frame.depth.as_slice();
    let rx: Vec<f64> = (0..w).map(|x| camera.ray(x as f64, 0.0).x).collect();
    let ry: Vec<f64> = (0..h).map(|y| camera.ray(0.0, y as f64).y).collect();
    // Invalid depth becomes an all-NaN point; any difference involving it
    // turns every cross-product component into NaN, which fails `len > 0`.
    let mut points = Vec::with_capacity(w * h);
    for (&yr, row) in ry.iter().zip(depth.chunks_exact(w)) {
        points.extend(rx.iter().zip(row).map(|(&xr, &d)| {
            let d = if is_valid_depth(d) { d } else { f64::NAN };
            Vector3::new(xr * d, yr * d, d)
        }));
    }

    let mut normals = vec![None; w * h];
    if w < 3 || h < 3 {
        return Image::from_vec(w, h, normals).expect("normal buffer sized to frame");
    }
    for y in 1..h - 1 {
        let (up, mid, down) = (&points[(y - 1) * w..y * w], &points[y * w..(y + 1) * w], &points[(y + 1) * w..(y + 2) * w]);
        let out = &mut normals[y * w..(y + 1) * w];
        for x in 1..w - 1 {
            let p = mid[x];
            if p.z.is_nan() {
                continue;
            }
            let n = (mid[x + 1] - mid[x - 1]).cross(&(down[x] - up[x]));
            let len = n.norm();
            if !(len > 0.0) {
                continue;
            }
            let mut n = n / len;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            out[x] = Some(n);
        }
    }
    Image::from_vec(w, h, normals).expect("normal buffer sized to frame")
}

/// Any unit vector orthogonal to `n`, plus the completing basis vector.
fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

fn is_degenerate(cov: &Matrix3<f64>) -> bool {
    let trace = cov.trace();
    if !(trace > 0.0) {
        return true;
    }
    // Sum of principal 2x2 minors = l1 l2 + l1 l3 + l2 l3; vanishes when
    // two eigenvalues do.
    let minors = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)]
        + cov[(0, 0)] * cov[(2, 2)]
        - cov[(0, 2)] * cov[(2, 0)]
        + cov[(1, 1)] * cov[(2, 2)]
        - cov[(1, 2)] * cov[(2, 1)];
    minors <= COLLINEAR_TOL * trace * trace
}

/// Fits `normal . (p - mean) + bias = 0` to `points` under a Huber loss of
/// radius `delta`, starting from `initial_normal` and zero bias.
///
/// Gauss-Newton with Huber reweighting; the normal is updated in its tangent
/// plane and renormalized each step. Stops after a step below 1e-6 or 10
/// iterations.
pub fn fit_plane(points: &[Vector3<f64>], initial_normal: &Vector3<f64>, delta: f64) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::DegeneratePlane);
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - mean).collect();
    let scatter = centered.iter().fold(Matrix3::zeros(), |m, q| m + q * q.transpose());
    if is_degenerate(&scatter) {
        return Err(Error::DegeneratePlane);
    }

    let mut normal = match initial_normal.try_normalize(1e-12) {
        Some(n) => n,
        None => mean.try_normalize(1e-12).map(|m| -m).unwrap_or(-Vector3::z()),
    };
    let mut bias = 0.0;

    for _ in 0..PLANE_MAX_ITERS {
        let (t1, t2) = tangent_basis(&normal);
        let inside = centered.iter().all(|q| (normal.dot(q) + bias).abs() <= delta);
        let (h, g) = if inside {
            // Unit weights: the normal equations follow from the scatter
            // matrix, and the centered points sum to zero.
            let (mt1, mt2) = (scatter * t1, scatter * t2);
            let n = centered.len() as f64;
            (
                Matrix3::new(t1.dot(&mt1), t1.dot(&mt2), 0.0, t2.dot(&mt1), t2.dot(&mt2), 0.0, 0.0, 0.0, n),
                Vector3::new(normal.dot(&mt1), normal.dot(&mt2), n * bias),
            )
        } else {
            // Jacobian rows are (q.t1, q.t2, 1); accumulate the unique entries.
            let [mut haa, mut hab, mut hbb, mut ha, mut hb, mut hw] = [0.0; 6];
            let [mut ga, mut gb, mut g1] = [0.0; 3];
            for q in &centered {
                let r = normal.dot(q) + bias;
                let w = huber_weight(r, delta);
                let (a, b) = (q.dot(&t1), q.dot(&t2));
                let (wa, wb, wr) = (w * a, w * b, w * r);
                haa += wa * a;
                hab += wa * b;
                hbb += wb * b;
                ha += wa;
                hb += wb;
                hw += w;
                ga += wr * a;
                gb += wr * b;
                g1 += wr;
            }
            (
                Matrix3::new(haa, hab, ha, hab, hbb, hb, ha, hb, hw),
                Vector3::new(ga, gb, g1),
            )
        };
        let step = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => return Err(Error::DegeneratePlane),
        };
        normal = (normal + t1 * step.x + t2 * step.y).normalize();
        bias += step.z;
        if step.norm() < PLANE_STEP_TOL {
            break;
        }
    }

    if normal.dot(&mean) > 0.0 {
        normal = -normal;
        bias = -bias;
    }
    let inlier_count = centered
        .iter()
        .filter(|q| (normal.dot(q) + bias).abs() <= delta)
        .count();
    Ok(PlaneFit {
        normal,
        bias,
        mean_point: mean,
        inlier_count,
    })
}

/// Point on the fitted plane seen at pixel `center`.
pub fn surfel_position(fit: &PlaneFit, center: Vector2<f64>, camera: &CameraModel) -> Result<Vector3<f64>> {
    let ray = camera.ray(center.x, center.y);
    let denom = fit.normal.dot(&ray);
    if !(denom.abs() > GRAZING_TOL) {
        return Err(Error::GrazingSurfel);
    }
    Ok(ray * ((fit.normal.dot(&fit.mean_point) - fit.bias) / denom))
}

/// Disk radius whose projection covers a superpixel of pixel radius
/// `pixel_radius` centred at `center`.
pub fn surfel_radius(
    fit: &PlaneFit,
    position: &Vector3<f64>,
    pixel_radius: f64,
    center: Vector2<f64>,
    camera: &CameraModel,
) -> Result<f64> {
    let ray = camera.ray(center.x, center.y);
    let denom = fit.normal.dot(&ray).abs();
    if !(denom > GRAZING_TOL) {
        return Err(Error::GrazingSurfel);
    }
    Ok(position.z * pixel_radius * ray.norm() / (camera.focal() * denom))
}

/// Inverse depth variance `b^2 f^2 / (z^4 sigma^2)`.
#[inline]
pub fn surfel_weight(z: f64, camera: &CameraModel) -> f64 {
    let bf = camera.bf();
    let z2 = z * z;
    bf * bf / (z2 * z2 * camera.disparity_sigma * camera.disparity_sigma)
}

/// One surfel per eligible superpixel, in the camera frame.
///
/// A superpixel is eligible with more than `min_pixels` members and a valid
/// depth. Surfels come out ordered by center index.
pub fn initialize_surfels(
    frame: &Frame,
    segmentation: &Segmentation,
    normals: &NormalMap,
    cfg: &SegmentationConfig,
    camera: &CameraModel,
) -> FrameSurfels {
    let members = segmentation.members();
    let w = frame.width();
    let depth = frame.depth.as_slice();
    let normal_px = normals.as_slice();
    let mut out = FrameSurfels::default();
    let mut points = Vec::new();

    for (idx, c) in segmentation.centers.iter().enumerate() {
        if (c.pixel_count as usize) <= cfg.min_pixels {
            out.skipped.too_small += 1;
            continue;
        }
        if !c.has_depth() {
            out.skipped.no_depth += 1;
            continue;
        }

        points.clear();
        let mut normal_sum = Vector3::zeros();
        for &p in members.of(idx) {
            let p = p as usize;
            let d = depth[p];
            if !is_valid_depth(d) {
                continue;
            }
            points.push(camera.ray((p % w) as f64, (p / w) as f64) * d);
            if let Some(n) = normal_px[p] {
                normal_sum += n;
            }
        }
        if points.len() < 3 {
            out.skipped.too_few_points += 1;
            continue;
        }

        let center = Vector2::new(c.x, c.y);
        let initial = normal_sum
            .try_normalize(1e-12)
            .unwrap_or_else(|| -camera.ray(c.x, c.y).normalize());
        let fit = match fit_plane(&points, &initial, cfg.huber_delta) {
            Ok(f) => f,
            Err(_) => {
                out.skipped.degenerate += 1;
                continue;
            }
        };
        let position = match surfel_position(&fit, center, camera) {
            Ok(p) if p.z > 0.0 => p,
            _ => {
                out.skipped.grazing += 1;
                continue;
            }
        };
        let radius = match surfel_radius(&fit, &position, c.radius, center, camera) {
            Ok(r) if r > 0.0 => r,
            _ => {
                out.skipped.grazing += 1;
                continue;
            }
        };

        out.surfels.push(Surfel {
            position,
            normal: fit.normal,
            intensity: c.intensity,
            weight: surfel_weight(position.z, camera),
            radius,
            update_count: 0,
            attached_keyframe: frame.ref_keyframe,
        });
        out.centers.push(idx as u32);
    }
    out
}
