//! Exact nearest-neighbour queries over a static point cloud using a uniform
//! voxel hash.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

type Cell = [i64; 3];

#[derive(Debug, Clone)]
pub struct PointCloudIndex {
    points: Vec<Vector3<f64>>,
    cells: HashMap<Cell, Vec<u32>>,
    cell_size: f64,
    lo: Cell,
    hi: Cell,
}

impl PointCloudIndex {
    /// Builds an index with a cell size suited to surface-like clouds.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        let first = *points.first().ok_or(Error::EmptyInput("reference cloud"))?;
        let (min, max) = points.iter().fold((first, first), |(a, b), p| (a.inf(p), b.sup(p)));
        let diag = (max - min).norm();
        let cell = (2.0 * diag / (points.len() as f64).sqrt()).max(1e-6);
        Self::with_cell_size(points, cell)
    }

    pub fn with_cell_size(points: Vec<Vector3<f64>>, cell_size: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("reference cloud"));
        }
        if !(cell_size > 0.0) || points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Config("point cloud must be finite with positive cell size".into()));
        }
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, cell_size);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Ok(Self {
            points,
            cells,
            cell_size,
            lo,
            hi,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Index and distance of the point closest to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let c = cell_of(q, self.cell_size);
        // Beyond this ring every cell is outside the occupied range.
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        let visit = |cell: Cell, best: &mut (usize, f64)| {
            if let Some(ids) = self.cells.get(&cell) {
                for &i in ids {
                    let d = (self.points[i as usize] - q).norm_squared();
                    if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                        *best = (i as usize, d);
                    }
                }
            }
        };
        for r in 0..=max_ring {
            // Shells this wide cost more than scanning every point.
            let side = (2 * r + 1) as usize;
            if side.saturating_mul(side).saturating_mul(side) > 8 * self.points.len() {
                for (i, p) in self.points.iter().enumerate() {
                    let d = (p - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        best = (i, d);
                    }
                }
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs() == r || dy.abs() == r {
                        for dz in -r..=r {
                            visit([c[0] + dx, c[1] + dy, c[2] + dz], &mut best);
                        }
                    } else {
                        visit([c[0] + dx, c[1] + dy, c[2] - r], &mut best);
                        if r > 0 {
                            visit([c[0] + dx, c[1] + dy, c[2] + r], &mut best);
                        }
                    }
                }
            }
            // Points in ring r + 1 are at least r cells away.
            let reach = r as f64 * self.cell_size;
            if best.1 <= reach * reach {
                break;
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn cell_of(p: &Vector3<f64>, size: f64) -> Cell {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}
