//! Synthetic vessel trees: tapered tubes along Catmull-Rom centerlines.
//!
//! Branch 0 is the root and crosses the volume near its center. Every later
//! branch leaves a random earlier branch at 25-75% of its length, turned by
//! an angle drawn from the configured range, and is 0.6 times as long as its
//! parent. Radii shrink by `radius_taper` per tree level and again along each
//! branch. Tubes have flat end caps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec;
use crate::geometry::{add, cross, dot, norm, normalize, scale, sub, BinaryVolume, GridSpec, Vec3};
use crate::metrics::label_components_26;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_branches: usize,
    pub radius_root_mm: f64,
    /// Radius factor per tree level, in `(0, 1]`.
    pub radius_taper: f64,
    /// Branching angle range in degrees.
    pub branch_angle_range_deg: (f64, f64),
    pub control_points: usize,
    /// Amplitude of the random lateral control-point offsets; 0 gives
    /// straight branches.
    pub tortuosity_mm: f64,
    pub grid: GridSpec,
}

impl PhantomSpec {
    pub fn new(grid: GridSpec, seed: u64) -> Self {
        let h = grid.half_extent();
        let ext = h[0].min(h[1]).min(h[2]);
        Self {
            seed,
            n_branches: 3,
            radius_root_mm: 2.5 * grid.spacing.iter().copied().fold(0.0, f64::max),
            radius_taper: 0.8,
            branch_angle_range_deg: (30.0, 60.0),
            control_points: 5,
            tortuosity_mm: 0.12 * ext,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_branches == 0 {
            return Err(Error::invalid("n_branches", "must be >= 1"));
        }
        if !(self.radius_root_mm > 0.0) || !self.radius_root_mm.is_finite() {
            return Err(Error::invalid("radius_root_mm", format!("must be > 0, got {}", self.radius_root_mm)));
        }
        if !(self.radius_taper > 0.0 && self.radius_taper <= 1.0) {
            return Err(Error::invalid("radius_taper", format!("must lie in (0, 1], got {}", self.radius_taper)));
        }
        let (a, b) = self.branch_angle_range_deg;
        if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b && b <= 180.0) {
            return Err(Error::invalid("branch_angle_range_deg", format!("need 0 <= lo <= hi <= 180, got ({a}, {b})")));
        }
        if self.control_points < 2 {
            return Err(Error::invalid("control_points", "must be >= 2"));
        }
        if !(self.tortuosity_mm >= 0.0) || !self.tortuosity_mm.is_finite() {
            return Err(Error::invalid("tortuosity_mm", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Branch {
    /// Dense centerline samples with tangent and radius.
    samples: Vec<(Vec3, Vec3, f64)>,
    length: f64,
    depth: u32,
}

fn catmull_rom(p0: Vec3, p1: Vec3, p2: Vec3, p3: Vec3, t: f64) -> Vec3 {
    let t2 = t * t;
    let t3 = t2 * t;
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = 0.5
            * (2.0 * p1[a]
                + (-p0[a] + p2[a]) * t
                + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
                + (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * t3);
    }
    out
}

/// Points along the spline through `ctrl`, no farther apart than `step`.
fn sample_spline(ctrl: &[Vec3], step: f64) -> Vec<Vec3> {
    let n = ctrl.len();
    let get = |i: i64| -> Vec3 {
        if i < 0 {
            sub(scale(ctrl[0], 2.0), ctrl[1])
        } else if i as usize >= n {
            sub(scale(ctrl[n - 1], 2.0), ctrl[n - 2])
        } else {
            ctrl[i as usize]
        }
    };
    let mut pts = vec![ctrl[0]];
    for s in 0..n - 1 {
        let (p0, p1, p2, p3) = (get(s as i64 - 1), get(s as i64), get(s as i64 + 1), get(s as i64 + 2));
        // Conservative sub-steps from the control polygon length.
        let poly = norm(sub(p1, p0)) + norm(sub(p2, p1)) + norm(sub(p3, p2));
        let k = ((poly / step).ceil() as usize).max(1);
        for j in 1..=k {
            pts.push(catmull_rom(p0, p1, p2, p3, j as f64 / k as f64));
        }
    }
    pts
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return scale(v, 1.0 / n);
        }
    }
}

fn perpendicular<R: Rng>(rng: &mut R, d: Vec3) -> Vec3 {
    loop {
        let c = cross(d, random_unit(rng));
        if norm(c) > 1e-3 {
            return normalize(c);
        }
    }
}

fn build_branch<R: Rng>(
    rng: &mut R,
    spec: &PhantomSpec,
    start: Vec3,
    dir: Vec3,
    length: f64,
    depth: u32,
    box_half: Vec3,
) -> Branch {
    let nc = spec.control_points;
    let (e1, e2) = {
        let a = perpendicular(rng, dir);
        (a, cross(dir, a))
    };
    let clamp = |p: Vec3| [0, 1, 2].map(|a| p[a].clamp(-box_half[a], box_half[a]));
    let mut ctrl = Vec::with_capacity(nc);
    for i in 0..nc {
        let f = i as f64 / (nc - 1) as f64;
        let mut p = add(start, scale(dir, f * length));
        if i > 0 && spec.tortuosity_mm > 0.0 {
            let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            p = add(p, add(scale(e1, a * spec.tortuosity_mm), scale(e2, b * spec.tortuosity_mm)));
        }
        ctrl.push(clamp(p));
    }
    let step = 0.25 * spec.grid.min_spacing();
    let pts = sample_spline(&ctrl, step);
    let mut cum = vec![0.0; pts.len()];
    for i in 1..pts.len() {
        cum[i] = cum[i - 1] + norm(sub(pts[i], pts[i - 1]));
    }
    let total = *cum.last().unwrap_or(&0.0);
    let r0 = spec.radius_root_mm * spec.radius_taper.powi(depth as i32);
    let r1 = r0 * spec.radius_taper;
    let samples = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i.saturating_sub(1)], pts[(i + 1).min(pts.len() - 1)]);
            let t = if norm(sub(b, a)) > 0.0 { normalize(sub(b, a)) } else { dir };
            let f = if total > 0.0 { cum[i] / total } else { 0.0 };
            (pts[i], t, r0 + (r1 - r0) * f)
        })
        .collect();
    Branch { samples, length: total, depth }
}

fn rotate_towards(d: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    // `axis` is perpendicular to `d`, so this is a rotation in their plane.
    let (s, c) = angle.sin_cos();
    normalize(add(scale(d, c), scale(axis, s)))
}

/// Rasterize the branches into a mask (before connectivity cleanup).
fn rasterize(grid: &GridSpec, branches: &[Branch]) -> BinaryVolume {
    let [nx, ny, nz] = grid.dims;
    let h = grid.half_extent();
    let slab = nx * ny;
    let mut data = vec![0u8; grid.len()];
    exec::for_each_chunk_mut(&mut data, slab, |k, out| {
        let z = -h[2] + k as f64 * grid.spacing[2];
        for br in branches {
            let (first, last) = (br.samples[0], br.samples[br.samples.len() - 1]);
            for &(c, _, r) in &br.samples {
                if (z - c[2]).abs() > r {
                    continue;
                }
                let i_lo = (((c[0] - r + h[0]) / grid.spacing[0]).ceil().max(0.0)) as usize;
                let i_hi = (((c[0] + r + h[0]) / grid.spacing[0]).floor()).min(nx as f64 - 1.0);
                let j_lo = (((c[1] - r + h[1]) / grid.spacing[1]).ceil().max(0.0)) as usize;
                let j_hi = (((c[1] + r + h[1]) / grid.spacing[1]).floor()).min(ny as f64 - 1.0);
                if i_hi < 0.0 || j_hi < 0.0 {
                    continue;
                }
                for j in j_lo..=j_hi as usize {
                    let y = -h[1] + j as f64 * grid.spacing[1];
                    for i in i_lo..=i_hi as usize {
                        let p = [-h[0] + i as f64 * grid.spacing[0], y, z];
                        if out[i + nx * j] != 0 {
                            continue;
                        }
                        let d = sub(p, c);
                        if dot(d, d) > r * r {
                            continue;
                        }
                        if dot(sub(p, first.0), first.1) < 0.0 || dot(sub(p, last.0), last.1) > 0.0 {
                            continue;
                        }
                        out[i + nx * j] = 1;
                    }
                }
            }
        }
    });
    let _ = nz;
    BinaryVolume { spec: *grid, data }
}

/// Generate a binary vessel-tree phantom. Deterministic per seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<BinaryVolume> {
    spec.validate()?;
    let grid = spec.grid;
    let max_spacing = grid.spacing.iter().copied().fold(0.0, f64::max);
    let max_depth = (spec.n_branches - 1) as i32;
    let smallest = spec.radius_root_mm * spec.radius_taper.powi(max_depth + 1);
    if smallest < max_spacing {
        return Err(Error::invalid(
            "radius_root_mm",
            format!("smallest vessel radius {smallest:.3} mm is below the voxel spacing {max_spacing} mm"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = grid.half_extent();
    // Keep centerlines far enough inside that tubes never touch the faces.
    let margin = spec.radius_root_mm + max_spacing;
    let box_half = [0, 1, 2].map(|a| (h[a] - margin).max(0.0));
    let ext = box_half[0].min(box_half[1]).min(box_half[2]);

    let dir = random_unit(&mut rng);
    let center = [0, 1, 2].map(|a| rng.random_range(-0.2..=0.2) * box_half[a]);
    let root_len = 1.6 * ext;
    let start = sub(center, scale(dir, 0.5 * root_len));
    let mut branches = vec![build_branch(&mut rng, spec, start, dir, root_len, 0, box_half)];

    let (amin, amax) = spec.branch_angle_range_deg;
    while branches.len() < spec.n_branches {
        let pi = rng.random_range(0..branches.len());
        let parent = &branches[pi];
        let n = parent.samples.len();
        let u = rng.random_range(0.25..=0.75);
        let (at, tangent, _) = parent.samples[((n - 1) as f64 * u).round() as usize];
        let angle = rng.random_range(amin..=amax).to_radians();
        let axis = perpendicular(&mut rng, tangent);
        let d = rotate_towards(tangent, axis, angle);
        let (len, depth) = (0.6 * parent.length, parent.depth + 1);
        let b = build_branch(&mut rng, spec, at, d, len, depth, box_half);
        branches.push(b);
    }

    let mut vol = rasterize(&grid, &branches);
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
                    vol.set(i, j, k, 0);
                }
            }
        }
    }
    let (labels, count) = label_components_26(&vol);
    if count > 1 {
        let mut sizes = vec![0usize; count + 1];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        sizes[0] = 0;
        let keep = (1..=count).max_by_key(|&l| (sizes[l], core::cmp::Reverse(l))).unwrap_or(1) as u32;
        for (v, &l) in vol.data.iter_mut().zip(&labels) {
            *v = u8::from(l == keep);
        }
    }
    Ok(vol)
}
