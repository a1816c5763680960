//! Superpixel segmentation over intensity and depth.
//!
//! A SLIC-style k-means: centers start on a regular grid and the algorithm
//! alternates between assigning pixels to one of their four neighbouring grid
//! centers and re-estimating the centers. Depth participates in the distance
//! only when the pixel and all four candidates have valid depth, so frames
//! with holes in the depth map segment cleanly. Center depth is a Huber
//! (outlier-robust) mean of the member depths.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{is_valid_depth, Frame, Image, INVALID_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Distance in pixels between initial centers.
    pub grid_spacing: usize,
    /// Spatial normalization of the pixel distance (pixels).
    pub spatial_norm: f64,
    /// Intensity normalization of the pixel distance.
    pub intensity_norm: f64,
    /// Inverse-depth normalization of the pixel distance (1/m).
    pub depth_norm: f64,
    /// Huber radius in meters, shared with plane fitting.
    pub huber_delta: f64,
    /// Number of assignment/update rounds.
    pub iterations: usize,
    /// A superpixel needs strictly more members than this to seed a surfel.
    pub min_pixels: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            grid_spacing: 8,
            spatial_norm: 4.0,
            intensity_norm: 10.0,
            depth_norm: 0.05,
            huber_delta: 0.05,
            iterations: 5,
            min_pixels: 16,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.grid_spacing == 0
            || self.iterations == 0
            || self.min_pixels == 0
            || !pos(self.spatial_norm)
            || !pos(self.intensity_norm)
            || !pos(self.depth_norm)
            || !pos(self.huber_delta)
        {
            return Err(Error::Config(format!(
                "segmentation parameters must be strictly positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// State of one superpixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterCenter {
    pub x: f64,
    pub y: f64,
    /// Mean depth in meters, NaN when unknown.
    pub depth: f64,
    pub intensity: f64,
    /// Largest distance from a member pixel to `(x, y)`.
    pub radius: f64,
    pub pixel_count: u32,
    pub valid_depth_count: u32,
}

impl ClusterCenter {
    #[inline]
    pub fn has_depth(&self) -> bool {
        is_valid_depth(self.depth)
    }

    /// A center that lost all its pixels in the last update.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }
}

/// The regular grid the centers were seeded on. Candidate centers for a pixel
/// are the 2x2 block of grid cells whose seeds surround it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    pub cols: usize,
    pub rows: usize,
    pub spacing: usize,
    col_candidates: Vec<[u32; 2]>,
    row_candidates: Vec<[u32; 2]>,
}

impl GridLayout {
    pub fn new(width: usize, height: usize, spacing: usize) -> Self {
        let cols = (width / spacing).max(1);
        let rows = (height / spacing).max(1);
        Self {
            cols,
            rows,
            spacing,
            col_candidates: axis_candidates(width, spacing, cols),
            row_candidates: axis_candidates(height, spacing, rows),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seed pixel of grid cell `(col, row)`.
    pub fn seed(&self, col: usize, row: usize, width: usize, height: usize) -> (usize, usize) {
        let half = self.spacing / 2;
        (
            (col * self.spacing + half).min(width - 1),
            (row * self.spacing + half).min(height - 1),
        )
    }

    /// Indices of the four candidate centers of pixel `(x, y)`.
    #[inline]
    pub fn candidates(&self, x: usize, y: usize) -> [u32; 4] {
        let [c0, c1] = self.col_candidates[x];
        let [r0, r1] = self.row_candidates[y];
        let w = self.cols as u32;
        [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1]
    }
}

fn axis_candidates(len: usize, spacing: usize, cells: usize) -> Vec<[u32; 2]> {
    let half = (spacing / 2) as isize;
    let last = cells as isize - 1;
    (0..len)
        .map(|p| {
            let lo = (p as isize - half).div_euclid(spacing as isize);
            let a = lo.clamp(0, last) as u32;
            let b = (lo + 1).clamp(0, last) as u32;
            [a, b]
        })
        .collect()
}

/// Result of [`segment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub centers: Vec<ClusterCenter>,
    /// Center index of every pixel.
    pub labels: Image<u32>,
}

impl Segmentation {
    pub fn members(&self) -> ClusterMembers {
        ClusterMembers::build(&self.labels, self.centers.len())
    }

    /// Center index of the superpixel containing pixel `(x, y)`.
    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> usize {
        self.labels.get(x, y) as usize
    }

    /// Writes the label image as a 16-bit binary PGM.
    pub fn write_label_pgm(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(
            out,
            "P5\n{} {}\n65535\n",
            self.labels.width(),
            self.labels.height()
        )?;
        for &l in self.labels.as_slice() {
            out.write_all(&(l.min(u16::MAX as u32) as u16).to_be_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes centers as CSV with columns `x,y,d,c,r,count`.
    pub fn write_centers_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,y,d,c,r,count")?;
        for c in &self.centers {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.x, c.y, c.depth, c.intensity, c.radius, c.pixel_count
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Pixels of every cluster, bucketed by label.
#[derive(Debug, Clone)]
pub struct ClusterMembers {
    offsets: Vec<u32>,
    pixels: Vec<u32>,
}

impl ClusterMembers {
    pub fn build(labels: &Image<u32>, n_centers: usize) -> Self {
        let mut offsets = vec![0u32; n_centers + 1];
        for &l in labels.as_slice() {
            offsets[l as usize + 1] += 1;
        }
        for i in 0..n_centers {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut pixels = vec![0u32; labels.as_slice().len()];
        for (idx, &l) in labels.as_slice().iter().enumerate() {
            let slot = &mut cursor[l as usize];
            pixels[*slot as usize] = idx as u32;
            *slot += 1;
        }
        Self { offsets, pixels }
    }

    /// Row-major pixel indices of cluster `center`, in ascending order.
    #[inline]
    pub fn of(&self, center: usize) -> &[u32] {
        &self.pixels[self.offsets[center] as usize..self.offsets[center + 1] as usize]
    }
}

/// Distance without depth: spatial plus intensity term.
#[inline]
pub fn pixel_distance(
    center: &ClusterCenter,
    x: f64,
    y: f64,
    intensity: f64,
    cfg: &SegmentationConfig,
) -> f64 {
    let dx = center.x - x;
    let dy = center.y - y;
    let dc = center.intensity - intensity;
    (dx * dx + dy * dy) / (cfg.spatial_norm * cfg.spatial_norm)
        + dc * dc / (cfg.intensity_norm * cfg.intensity_norm)
}

/// Distance with depth: adds the squared inverse-depth difference.
pub fn pixel_distance_depth(
    center: &ClusterCenter,
    x: f64,
    y: f64,
    intensity: f64,
    depth: f64,
    cfg: &SegmentationConfig,
) -> Result<f64> {
    if !center.has_depth() {
        return Err(Error::InvalidDepth(center.depth));
    }
    if !is_valid_depth(depth) {
        return Err(Error::InvalidDepth(depth));
    }
    let di = 1.0 / center.depth - 1.0 / depth;
    Ok(pixel_distance(center, x, y, intensity, cfg) + di * di / (cfg.depth_norm * cfg.depth_norm))
}

/// One center per grid cell, taking location, intensity and depth from the
/// seed pixel. Seeds without valid depth give centers with unknown depth.
pub fn initialize_centers(frame: &Frame, cfg: &SegmentationConfig) -> Vec<ClusterCenter> {
    let (w, h) = (frame.width(), frame.height());
    let grid = GridLayout::new(w, h, cfg.grid_spacing);
    let mut centers = Vec::with_capacity(grid.len());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (sx, sy) = grid.seed(col, row, w, h);
            centers.push(ClusterCenter {
                x: sx as f64,
                y: sy as f64,
                depth: frame.depth.depth(sx, sy).unwrap_or(INVALID_DEPTH),
                intensity: frame.intensity.get(sx, sy) as f64,
                radius: 0.0,
                pixel_count: 0,
                valid_depth_count: 0,
            });
        }
    }
    centers
}

/// Assigns every pixel to the closest of its four candidate centers.
///
/// `centers` must be laid out on the grid produced by [`initialize_centers`].
pub fn assign_pixels(frame: &Frame, centers: &[ClusterCenter], cfg: &SegmentationConfig) -> Image<u32> {
    assign_with_inverse(frame, &inverse_depth(frame), centers, cfg).0
}

/// Per-pixel inverse depth, NaN where depth is invalid.
fn inverse_depth(frame: &Frame) -> Vec<f64> {
    frame
        .depth
        .as_slice()
        .iter()
        .map(|&d| if is_valid_depth(d) { 1.0 / d } else { f64::NAN })
        .collect()
}

/// Labels plus the per-cluster sums the next update needs, gathered in the
/// same raster order a separate pass would use.
fn assign_with_inverse(
    frame: &Frame,
    inv_depth: &[f64],
    centers: &[ClusterCenter],
    cfg: &SegmentationConfig,
) -> (Image<u32>, Vec<Acc>) {
    let (w, h) = (frame.width(), frame.height());
    let grid = GridLayout::new(w, h, cfg.grid_spacing);
    assert_eq!(
        grid.len(),
        centers.len(),
        "centers do not match the segmentation grid"
    );

    // Every coordinate is divided by its normalization up front so the
    // distance is a plain sum of squares.
    let (ks, kc, kd) = (1.0 / cfg.spatial_norm, 1.0 / cfg.intensity_norm, 1.0 / cfg.depth_norm);

    // NaN inverse depth marks centers without depth.
    let cx: Vec<f64> = centers.iter().map(|c| c.x * ks).collect();
    let cy: Vec<f64> = centers.iter().map(|c| c.y * ks).collect();
    let cc: Vec<f64> = centers.iter().map(|c| c.intensity * kc).collect();
    let cinv: Vec<f64> = centers
        .iter()
        .map(|c| if c.has_depth() { kd / c.depth } else { f64::NAN })
        .collect();
    let ux: Vec<f64> = (0..w).map(|x| x as f64 * ks).collect();

    let intensity = frame.intensity.as_slice();
    let mut labels = vec![0u32; w * h];
    let mut acc = vec![Acc::default(); centers.len()];

    // Columns sharing a candidate pair form runs; within a run the four
    // candidates are fixed.
    let mut col_runs: Vec<(usize, usize, [u32; 2])> = Vec::new();
    for (x, &pair) in grid.col_candidates.iter().enumerate() {
        match col_runs.last_mut() {
            Some(run) if run.2 == pair => run.1 = x + 1,
            _ => col_runs.push((x, x + 1, pair)),
        }
    }
    let cols = grid.cols as u32;

    for y in 0..h {
        let fy = y as f64 * ks;
        let [r0, r1] = grid.row_candidates[y];
        let row = y * w;
        for &(x0, x1, [c0, c1]) in &col_runs {
            let cand = [r0 * cols + c0, r0 * cols + c1, r1 * cols + c0, r1 * cols + c1];
            let px = cand.map(|c| cx[c as usize]);
            let pc = cand.map(|c| cc[c as usize]);
            let pinv = cand.map(|c| cinv[c as usize]);
            let dy2 = cand.map(|c| (cy[c as usize] - fy) * (cy[c as usize] - fy));
            let all_depth = pinv.iter().all(|v| !v.is_nan());
            let xs = &ux[x0..x1];
            let ui = &intensity[row + x0..row + x1];
            let uinv = &inv_depth[row + x0..row + x1];
            let out = &mut labels[row + x0..row + x1];
            for i in 0..xs.len() {
                let (fx, fc, fd) = (xs[i], ui[i] as f64 * kc, uinv[i] * kd);
                let mut dist = [0.0f64; 4];
                for k in 0..4 {
                    let dx = px[k] - fx;
                    let dc = pc[k] - fc;
                    dist[k] = dx * dx + dy2[k] + dc * dc;
                }
                if all_depth && !fd.is_nan() {
                    for k in 0..4 {
                        let di = pinv[k] - fd;
                        dist[k] += di * di;
                    }
                }
                // Pairwise tournament; ties go to the lower candidate index.
                let (b01, d01) = if dist[1] < dist[0] { (1, dist[1]) } else { (0, dist[0]) };
                let (b23, d23) = if dist[3] < dist[2] { (3, dist[3]) } else { (2, dist[2]) };
                let best = if d23 < d01 { b23 } else { b01 };
                out[i] = cand[best];
                acc[cand[best] as usize].add((x0 + i) as u64, y as u64, ui[i], !uinv[i].is_nan());
            }
        }
    }
    (Image::from_vec(w, h, labels).expect("label buffer sized to frame"), acc)
}

/// Huber-loss location estimate of `depths`.
///
/// Returns the exact minimizer of `sum L_delta(d_k - d)`. When the minimum is
/// a flat interval (widely separated samples) its midpoint is returned.
pub fn robust_mean_depth(depths: &[f64], delta: f64) -> Result<f64> {
    if depths.is_empty() {
        return Err(Error::EmptyInput("robust_mean_depth"));
    }
    let mut scratch = depths.to_vec();
    Ok(huber_location(&mut scratch, delta, f64::NAN))
}

/// Slope magnitude below which a Newton iterate is accepted as the minimizer.
const SLOPE_TOL: f64 = 1e-12;
const KINK_TOL: f64 = 1e-9;
const NEWTON_PASSES: usize = 6;

/// As [`robust_mean_depth`], starting from `guess` when it is finite. May
/// reorder `depths`, which must be non-empty.
///
/// A few Newton steps usually land on the minimizer, since each one is exact
/// once the set of samples in the quadratic zone stops changing. An iterate is
/// only accepted when the slope there vanishes with positive curvature and no
/// sample sits on a kink, which makes it the unique minimizer. Otherwise the
/// exact sweep decides.
/// Sum of clipped residuals about `est` and the number of samples inside the
/// quadratic zone. Four independent lanes let the loop vectorize.
fn huber_slope(depths: &[f64], est: f64, delta: f64) -> (f64, u32) {
    let term = |d: f64| {
        let r = d - est;
        let a = r.abs();
        (if a <= delta { r } else { delta.copysign(r) }, u32::from(a <= delta))
    };
    let (mut slope, mut curv) = ([0.0f64; 4], [0u32; 4]);
    let chunks = depths.chunks_exact(4);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..4 {
            let (s, n) = term(c[k]);
            slope[k] += s;
            curv[k] += n;
        }
    }
    for (k, &d) in tail.iter().enumerate() {
        let (s, n) = term(d);
        slope[k] += s;
        curv[k] += n;
    }
    ((slope[0] + slope[1]) + (slope[2] + slope[3]), curv.iter().sum())
}

fn huber_location(depths: &mut [f64], delta: f64, guess: f64) -> f64 {
    let mut est = if guess.is_finite() {
        guess
    } else {
        depths.iter().sum::<f64>() / depths.len() as f64
    };
    for _ in 0..NEWTON_PASSES {
        let (slope, curv) = huber_slope(depths, est, delta);
        if curv == 0 {
            break;
        }
        if slope.abs() <= SLOPE_TOL {
            // A sample on a kink may border a flat minimum; the sweep settles it.
            let on_kink = depths.iter().any(|&d| ((d - est).abs() - delta).abs() < KINK_TOL);
            if on_kink {
                break;
            }
            return est;
        }
        est += slope / curv as f64;
    }
    huber_sweep(depths, delta)
}

/// Exact minimizer by sweeping the kinks of the slope.
///
/// The slope of the energy is piecewise linear and decreasing, with kinks at
/// `d_k - delta` (sample enters the quadratic zone) and `d_k + delta` (leaves
/// it). The segment where it crosses zero holds the minimizer.
fn huber_sweep(depths: &mut [f64], delta: f64) -> f64 {
    let n = depths.len();
    let mid = (n - 1) / 2;
    let (_, &mut median, upper) = depths.select_nth_unstable_by(mid, f64::total_cmp);
    // Half the samples more than 2 delta below the other half: the slope is
    // zero between them and the midpoint of that interval is the median.
    if n.is_multiple_of(2) {
        let next_up = upper.iter().copied().fold(f64::INFINITY, f64::min);
        if next_up - median >= 2.0 * delta {
            return 0.5 * (median + next_up);
        }
    }
    // At least half the samples sit on either side of the median, which pins
    // the slope's sign at median -/+ delta. Over that bracket samples farther
    // than 2 delta only add a constant, so only the near ones are swept.
    let (far_lo, far_hi) = (median - 2.0 * delta, median + 2.0 * delta);
    let (mut below, mut above, mut k) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let d = depths[i];
        if d <= far_lo {
            below += 1;
        } else if d >= far_hi {
            above += 1;
        } else {
            depths[k] = d;
            k += 1;
        }
    }
    let near = &mut depths[..k];
    near.sort_unstable_by(f64::total_cmp);

    let mut cur = median - delta;
    let mut enter = near.partition_point(|&d| d - delta <= cur);
    let mut leave = near.partition_point(|&d| d + delta <= cur);
    let mut inside_sum: f64 = near[leave..enter].iter().sum();
    let outside = delta * (above as f64 - below as f64);
    while leave < k {
        let next = if enter < k {
            (near[enter] - delta).min(near[leave] + delta)
        } else {
            near[leave] + delta
        };
        // Negative slope on [cur, next] is linear_part - inside * d.
        let inside = enter - leave;
        let linear_part = outside + delta * (k as f64 - (enter + leave) as f64) + inside_sum;
        if inside > 0 {
            let root = linear_part / inside as f64;
            if root <= next {
                return root.max(cur);
            }
        }
        if enter < k && near[enter] - delta <= near[leave] + delta {
            inside_sum += near[enter];
            enter += 1;
        } else {
            inside_sum -= near[leave];
            leave += 1;
        }
        cur = next;
    }
    cur
}

/// Raster-order sums and counts of one cluster. Coordinates are summed as
/// integers, which is exact.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Acc {
    x: u64,
    y: u64,
    intensity: f64,
    count: u32,
    valid_depth: u32,
}

impl Acc {
    #[inline]
    fn add(&mut self, x: u64, y: u64, intensity: f32, valid_depth: bool) {
        self.x += x;
        self.y += y;
        self.intensity += intensity as f64;
        self.count += 1;
        self.valid_depth += u32::from(valid_depth);
    }
}

fn accumulate(frame: &Frame, labels: &Image<u32>, n_centers: usize) -> Vec<Acc> {
    let w = frame.width();
    let (intensity, depth) = (frame.intensity.as_slice(), frame.depth.as_slice());
    let mut acc = vec![Acc::default(); n_centers];
    for (y, row) in labels.as_slice().chunks_exact(w).enumerate() {
        let base = y * w;
        for (x, &l) in row.iter().enumerate() {
            acc[l as usize].add(x as u64, y as u64, intensity[base + x], is_valid_depth(depth[base + x]));
        }
    }
    acc
}

/// Re-estimates every center from its assigned pixels.
///
/// Centers that received no pixels keep their previous state with zero counts.
/// A center without depth only gains one once at least `min_pixels / 2` of its
/// members have valid depth.
pub fn update_centers(
    frame: &Frame,
    labels: &Image<u32>,
    centers: &[ClusterCenter],
    cfg: &SegmentationConfig,
) -> Vec<ClusterCenter> {
    let acc = accumulate(frame, labels, centers.len());
    update_with(frame, labels, &acc, centers, cfg, true)
}

/// Assignment never reads the radius, so intermediate rounds skip it and
/// leave it at zero.
fn update_with(
    frame: &Frame,
    labels: &Image<u32>,
    acc: &[Acc],
    centers: &[ClusterCenter],
    cfg: &SegmentationConfig,
    with_radius: bool,
) -> Vec<ClusterCenter> {
    let (w, n_centers) = (frame.width(), centers.len());
    let depth = frame.depth.as_slice();
    let label = labels.as_slice();
    let promote_at = cfg.min_pixels / 2;

    let mut depth_offsets = vec![0u32; n_centers + 1];
    for (i, a) in acc.iter().enumerate() {
        depth_offsets[i + 1] = depth_offsets[i] + a.valid_depth;
    }
    let means: Vec<(f64, f64)> = acc
        .iter()
        .map(|a| {
            let n = a.count.max(1) as f64;
            (a.x as f64 / n, a.y as f64 / n)
        })
        .collect();

    // Second pass: valid depths grouped by cluster (raster order within each
    // group), and the radius about the mean when requested.
    let mut radius2 = vec![0.0f64; n_centers];
    let mut grouped = vec![0.0f64; depth_offsets[n_centers] as usize];
    let mut cursor = depth_offsets.clone();
    for (y, row) in label.chunks_exact(w).enumerate() {
        let base = y * w;
        for (x, &l) in row.iter().enumerate() {
            let l = l as usize;
            if with_radius {
                let (mx, my) = means[l];
                let (dx, dy) = (x as f64 - mx, y as f64 - my);
                let r2 = dx * dx + dy * dy;
                let r = &mut radius2[l];
                *r = if r2 > *r { r2 } else { *r };
            }
            let d = depth[base + x];
            if is_valid_depth(d) {
                grouped[cursor[l] as usize] = d;
                cursor[l] += 1;
            }
        }
    }

    centers
        .iter()
        .enumerate()
        .map(|(i, prev)| {
            let count = acc[i].count;
            if count == 0 {
                return ClusterCenter {
                    pixel_count: 0,
                    valid_depth_count: 0,
                    ..*prev
                };
            }
            let depths = &mut grouped[depth_offsets[i] as usize..depth_offsets[i + 1] as usize];
            let may_estimate = prev.has_depth() || depths.len() >= promote_at;
            let d = if !depths.is_empty() && may_estimate {
                huber_location(depths, cfg.huber_delta, prev.depth)
            } else {
                INVALID_DEPTH
            };
            let (mx, my) = means[i];
            ClusterCenter {
                x: mx,
                y: my,
                depth: d,
                intensity: acc[i].intensity / count as f64,
                radius: radius2[i].sqrt(),
                pixel_count: count,
                valid_depth_count: depths.len() as u32,
            }
        })
        .collect()
}

/// Full segmentation: grid initialization followed by `cfg.iterations`
/// assignment/update rounds.
pub fn segment(frame: &Frame, cfg: &SegmentationConfig) -> Segmentation {
    let inv_depth = inverse_depth(frame);
    let mut centers = initialize_centers(frame, cfg);
    let (mut labels, acc) = assign_with_inverse(frame, &inv_depth, &centers, cfg);
    centers = update_with(frame, &labels, &acc, &centers, cfg, cfg.iterations <= 1);
    for round in 1..cfg.iterations {
        let acc;
        (labels, acc) = assign_with_inverse(frame, &inv_depth, &centers, cfg);
        centers = update_with(frame, &labels, &acc, &centers, cfg, round + 1 == cfg.iterations);
    }
    Segmentation { centers, labels }
}
