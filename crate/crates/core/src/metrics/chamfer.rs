//! Exact nearest-neighbor search over a uniform cell grid.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::Vec3;

#[inline]
pub(crate) fn dist2(a: Vec3, b: Vec3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Bucketed point set answering exact nearest-neighbor queries.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        assert!(!points.is_empty(), "cannot index an empty point set");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        // Roughly a couple of points per occupied cell for curve-like sets.
        let target = (points.len() as f64).cbrt().max(1.0) * 2.0;
        let cell = if ext > 0.0 { (ext / target).max(ext * 1e-9) } else { 1.0 };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1);
        }
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let key = |p: &Vec3| {
            let c = Self::cell_of(p, lo, cell, dims);
            c[0] + dims[0] * (c[1] + dims[1] * c[2])
        };
        for p in points {
            counts[key(p) + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let start = counts.clone();
        let mut fill = counts;
        let mut order = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let k = key(p);
            order[fill[k]] = i as u32;
            fill[k] += 1;
        }
        Self { points, lo, cell, dims, start, order }
    }

    #[inline]
    fn cell_of(p: &Vec3, lo: Vec3, cell: f64, dims: [usize; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] - lo[a]) / cell).floor();
            c[a] = if v < 0.0 { 0 } else { (v as usize).min(dims[a] - 1) };
        }
        c
    }

    /// Squared distance from `q` to the closest indexed point.
    pub fn nearest_dist2(&self, q: Vec3) -> f64 {
        let c = Self::cell_of(&q, self.lo, self.cell, self.dims);
        let max_r = self.dims.iter().copied().max().unwrap_or(1);
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            let r = r as i64;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let cc = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if (0..3).any(|a| cc[a] < 0 || cc[a] >= self.dims[a] as i64) {
                            continue;
                        }
                        let k = cc[0] as usize + self.dims[0] * (cc[1] as usize + self.dims[1] * cc[2] as usize);
                        for &i in &self.order[self.start[k]..self.start[k + 1]] {
                            best = best.min(dist2(q, self.points[i as usize]));
                        }
                    }
                }
            }
            // Every point outside rings 0..=r is at least r cells away.
            let reach = r as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

/// Mean over `a` of the squared distance to the nearest point of `b`.
pub(crate) fn mean_nearest_dist2(a: &[Vec3], b: &PointGrid<'_>) -> f64 {
    a.iter().map(|&p| b.nearest_dist2(p)).sum::<f64>() / a.len() as f64
}

/// Brute-force reference for [`mean_nearest_dist2`].
pub fn mean_nearest_dist2_brute(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .map(|&p| b.iter().fold(f64::INFINITY, |m, &q| m.min(dist2(p, q))))
        .sum::<f64>()
        / a.len() as f64
}
