//! Matched cone-beam forward projection and backprojection.
//!
//! Each ray is sampled at the midpoints of fixed-length steps between its
//! entry and exit of the interpolant support box; every sample reads the
//! volume through zero-padded trilinear interpolation. The backprojector
//! scatters with the very same weights, so the pair is an exact transpose.
//!
//! Detector images are stored `u` fastest: pixel `(u, v)` lives at
//! `v * det_u + u`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::exec::{self, ExecConfig, Reduction};
use crate::geometry::{build_pose, intersect_box, ray_unchecked, GridSpec, ProjectionGeometry, Ray, Vec3, VolumeGrid};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProjectorConfig {
    /// Ray-marching step in mm; `None` uses half the smallest voxel spacing.
    pub step_mm: Option<f64>,
}

impl ProjectorConfig {
    pub fn with_step(step_mm: f64) -> Self {
        Self { step_mm: Some(step_mm) }
    }

    pub fn step_for(&self, grid: &GridSpec) -> Result<f64> {
        let s = self.step_mm.unwrap_or(0.5 * grid.min_spacing());
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid("step_mm", format!("must be finite and > 0, got {s}")));
        }
        Ok(s)
    }
}

/// One detector image of line integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage<T> {
    pub view_id: usize,
    pub geometry: ProjectionGeometry,
    pub data: Vec<T>,
}

impl<T: Real> ProjectionImage<T> {
    pub fn zeros(view_id: usize, geometry: ProjectionGeometry) -> Self {
        Self { view_id, geometry, data: vec![T::zero(); geometry.n_pixels()] }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.data.len() != self.geometry.n_pixels() {
            return Err(Error::shape(format!(
                "view {}: {} values for a {}x{} detector",
                self.view_id,
                self.data.len(),
                self.geometry.det_u,
                self.geometry.det_v
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.geometry.det_u + u]
    }

    pub fn cast<U: Real>(&self) -> ProjectionImage<U> {
        ProjectionImage {
            view_id: self.view_id,
            geometry: self.geometry,
            data: self.data.iter().map(|v| U::cast(v.widen())).collect(),
        }
    }
}

/// Precomputed per-grid sampling constants.
#[derive(Debug, Clone, Copy)]
struct Tracer {
    dims: [usize; 3],
    lo: Vec3,
    hi: Vec3,
    half: Vec3,
    inv_spacing: Vec3,
    step: f64,
}

impl Tracer {
    fn new(grid: &GridSpec, step: f64) -> Self {
        let (lo, hi) = grid.support_box();
        Self {
            dims: grid.dims,
            lo,
            hi,
            half: grid.half_extent(),
            inv_spacing: [1.0 / grid.spacing[0], 1.0 / grid.spacing[1], 1.0 / grid.spacing[2]],
            step,
        }
    }

    fn sample_count(&self, ray: &Ray) -> usize {
        match intersect_box(ray, self.lo, self.hi) {
            Some((t0, t1)) => ((t1 - t0) / self.step).ceil() as usize,
            None => 0,
        }
    }

    /// Calls `f(offset, weight)` for every voxel touched by the ray, where
    /// `weight` is the trilinear weight times the step length.
    #[inline]
    fn trace<F: FnMut(usize, f64)>(&self, ray: &Ray, mut f: F) {
        let Some((t0, t1)) = intersect_box(ray, self.lo, self.hi) else {
            return;
        };
        let n = ((t1 - t0) / self.step).ceil() as usize;
        let [nx, ny, nz] = self.dims;
        for k in 0..n {
            let t = t0 + (k as f64 + 0.5) * self.step;
            let mut base = [0i64; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let g = (ray.origin[a] + t * ray.dir[a] + self.half[a]) * self.inv_spacing[a];
                let fl = g.floor();
                base[a] = fl as i64;
                frac[a] = g - fl;
            }
            for c in 0..8usize {
                let ix = base[0] + (c & 1) as i64;
                let iy = base[1] + ((c >> 1) & 1) as i64;
                let iz = base[2] + ((c >> 2) & 1) as i64;
                if ix < 0 || iy < 0 || iz < 0 || ix >= nx as i64 || iy >= ny as i64 || iz >= nz as i64 {
                    continue;
                }
                let wx = if c & 1 == 1 { frac[0] } else { 1.0 - frac[0] };
                let wy = if (c >> 1) & 1 == 1 { frac[1] } else { 1.0 - frac[1] };
                let wz = if (c >> 2) & 1 == 1 { frac[2] } else { 1.0 - frac[2] };
                let w = wx * wy * wz;
                if w != 0.0 {
                    f(ix as usize + nx * (iy as usize + ny * iz as usize), w * self.step);
                }
            }
        }
    }
}

/// All rays of a view set, in image order (view, then `v`, then `u`).
fn view_rays(geoms: &[ProjectionGeometry]) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(geoms.iter().map(|g| g.n_pixels()).sum());
    for g in geoms {
        g.validate()?;
        let pose = build_pose(g);
        for v in 0..g.det_v {
            for u in 0..g.det_u {
                rays.push(ray_unchecked(&pose, g, u, v));
            }
        }
    }
    Ok(rays)
}

fn check_volume<T: Real>(vol: &VolumeGrid<T>) -> Result<()> {
    vol.spec.validate()?;
    if vol.data.len() != vol.spec.len() {
        return Err(Error::shape(format!("volume holds {} values for {} voxels", vol.data.len(), vol.spec.len())));
    }
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("volume contains non-finite voxels".into()));
    }
    Ok(())
}

/// Line integrals of `vol` along every pixel ray of every view.
pub fn forward_project<T: Real>(
    vol: &VolumeGrid<T>,
    geoms: &[ProjectionGeometry],
    cfg: &ProjectorConfig,
    _exec_cfg: &ExecConfig,
) -> Result<Vec<ProjectionImage<T>>> {
    check_volume(vol)?;
    let tracer = Tracer::new(&vol.spec, cfg.step_for(&vol.spec)?);
    let mut out = Vec::with_capacity(geoms.len());
    for (view_id, g) in geoms.iter().enumerate() {
        let rays = view_rays(core::slice::from_ref(g))?;
        let mut img = ProjectionImage::zeros(view_id, *g);
        let chunk = g.det_u.max(1);
        exec::for_each_chunk_mut(&mut img.data, chunk, |ci, row| {
            for (j, px) in row.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                tracer.trace(&rays[ci * chunk + j], |o, w| acc += w * vol.data[o].widen());
                *px = T::cast(acc);
            }
        });
        out.push(img);
    }
    Ok(out)
}

/// Adjoint of [`forward_project`]: every ray sample scatters its pixel value
/// into the eight voxels it read, with the forward weights.
pub fn backproject<T: Real>(
    imgs: &[ProjectionImage<T>],
    grid: &GridSpec,
    cfg: &ProjectorConfig,
    exec_cfg: &ExecConfig,
) -> Result<VolumeGrid<T>> {
    grid.validate()?;
    for img in imgs {
        img.validate()?;
    }
    let geoms: Vec<ProjectionGeometry> = imgs.iter().map(|i| i.geometry).collect();
    let rays = view_rays(&geoms)?;
    let values: Vec<f64> = imgs.iter().flat_map(|i| i.data.iter().map(|v| v.widen())).collect();
    let tracer = Tracer::new(grid, cfg.step_for(grid)?);
    let n_vox = grid.len();

    // Fixed partition of the rays; the task count never depends on the pool.
    let n_tasks = rays.len().clamp(1, 64);
    let per = rays.len().div_ceil(n_tasks).max(1);
    let scatter = |task: usize, acc: &mut [f64]| {
        let lo = (task * per).min(rays.len());
        let hi = (lo + per).min(rays.len());
        for r in lo..hi {
            let p = values[r];
            if p != 0.0 {
                tracer.trace(&rays[r], |o, w| acc[o] += w * p);
            }
        }
    };
    let mut acc = vec![0.0f64; n_vox];
    let add = |a: &mut Vec<f64>, b: Vec<f64>| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += *y;
        }
    };
    match exec_cfg.reduction {
        Reduction::Deterministic => exec::reduce_tasks(
            n_tasks,
            Reduction::Deterministic,
            &mut acc,
            |t| {
                let mut part = vec![0.0f64; n_vox];
                scatter(t, &mut part);
                part
            },
            add,
            add,
            || vec![0.0f64; n_vox],
        ),
        Reduction::Fast => exec::reduce_tasks(
            n_tasks,
            Reduction::Fast,
            &mut acc,
            |t| t,
            |a: &mut Vec<f64>, t| scatter(t, a),
            add,
            || vec![0.0f64; n_vox],
        ),
    }
    VolumeGrid::new(*grid, acc.into_iter().map(T::cast).collect())
}

/// The projector as an explicit sparse matrix with its transpose.
///
/// Rows are the pixels of all views in image order, columns the voxel
/// offsets. Entries are stored in single precision; products and the
/// transposed products use the same stored values, so the cached pair is an
/// exact transpose as well. The transpose turns backprojection into a gather,
/// which needs no reduction across workers.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    grid: GridSpec,
    geoms: Vec<ProjectionGeometry>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f32>,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    t_vals: Vec<f32>,
}

impl SystemMatrix {
    /// Upper bound on the stored bytes, computed from ray lengths only.
    pub fn estimate_bytes(grid: &GridSpec, geoms: &[ProjectionGeometry], cfg: &ProjectorConfig) -> Result<usize> {
        let tracer = Tracer::new(grid, cfg.step_for(grid)?);
        let rays = view_rays(geoms)?;
        let samples: usize = rays.iter().map(|r| tracer.sample_count(r)).sum();
        // Two copies of (u32 index, f32 value) per entry, at most 8 per sample.
        Ok(samples * 8 * 2 * 8 + (rays.len() + grid.len()) * 2 * core::mem::size_of::<usize>())
    }

    pub fn build(grid: &GridSpec, geoms: &[ProjectionGeometry], cfg: &ProjectorConfig) -> Result<Self> {
        grid.validate()?;
        if grid.len() > u32::MAX as usize {
            return Err(Error::invalid("voxels", "too many voxels for a cached operator"));
        }
        let tracer = Tracer::new(grid, cfg.step_for(grid)?);
        let rays = view_rays(geoms)?;
        if rays.len() > u32::MAX as usize {
            return Err(Error::invalid("det_pixels", "too many rays for a cached operator"));
        }
        let row_entries: Vec<Vec<(u32, f32)>> = exec::map_tasks(rays.len(), |r| {
            let mut e: Vec<(usize, f64)> = Vec::new();
            tracer.trace(&rays[r], |o, w| e.push((o, w)));
            e.sort_by_key(|x| x.0);
            let mut merged: Vec<(u32, f32)> = Vec::with_capacity(e.len() / 2);
            let mut i = 0;
            while i < e.len() {
                let o = e[i].0;
                let mut w = 0.0;
                while i < e.len() && e[i].0 == o {
                    w += e[i].1;
                    i += 1;
                }
                merged.push((o as u32, w as f32));
            }
            merged
        });
        let nnz: usize = row_entries.iter().map(|r| r.len()).sum();
        let mut row_ptr = Vec::with_capacity(rays.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        let mut col_counts = vec![0usize; grid.len() + 1];
        row_ptr.push(0);
        for r in &row_entries {
            for &(c, w) in r {
                cols.push(c);
                vals.push(w);
                col_counts[c as usize + 1] += 1;
            }
            row_ptr.push(cols.len());
        }
        drop(row_entries);
        for i in 0..grid.len() {
            col_counts[i + 1] += col_counts[i];
        }
        let col_ptr = col_counts.clone();
        let mut fill = col_counts;
        let mut rows = vec![0u32; nnz];
        let mut t_vals = vec![0f32; nnz];
        for r in 0..rays.len() {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = cols[k] as usize;
                rows[fill[c]] = r as u32;
                t_vals[fill[c]] = vals[k];
                fill[c] += 1;
            }
        }
        Ok(Self { grid: *grid, geoms: geoms.to_vec(), row_ptr, cols, vals, col_ptr, rows, t_vals })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn geometries(&self) -> &[ProjectionGeometry] {
        &self.geoms
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn bytes(&self) -> usize {
        self.nnz() * 16 + (self.row_ptr.len() + self.col_ptr.len()) * core::mem::size_of::<usize>()
    }

    /// `out = A * vol` over the stacked pixels of all views.
    pub fn apply<T: Real>(&self, vol: &[T], out: &mut [T]) -> Result<()> {
        if vol.len() != self.grid.len() || out.len() != self.n_rows() {
            return Err(Error::shape(format!(
                "operator is {}x{}, got volume {} and output {}",
                self.n_rows(),
                self.grid.len(),
                vol.len(),
                out.len()
            )));
        }
        exec::for_each_chunk_mut(out, 256, |ci, dst| {
            for (j, o) in dst.iter_mut().enumerate() {
                let r = ci * 256 + j;
                let mut acc = 0.0f64;
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += self.vals[k] as f64 * vol[self.cols[k] as usize].widen();
                }
                *o = T::cast(acc);
            }
        });
        Ok(())
    }

    /// `out = A^T * img`.
    pub fn apply_transpose<T: Real>(&self, img: &[T], out: &mut [T]) -> Result<()> {
        if img.len() != self.n_rows() || out.len() != self.grid.len() {
            return Err(Error::shape(format!(
                "operator is {}x{}, got images {} and output {}",
                self.n_rows(),
                self.grid.len(),
                img.len(),
                out.len()
            )));
        }
        exec::for_each_chunk_mut(out, 1024, |ci, dst| {
            for (j, o) in dst.iter_mut().enumerate() {
                let c = ci * 1024 + j;
                let mut acc = 0.0f64;
                for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                    acc += self.t_vals[k] as f64 * img[self.rows[k] as usize].widen();
                }
                *o = T::cast(acc);
            }
        });
        Ok(())
    }

    /// Split stacked pixel values into per-view images.
    pub fn split_views<T: Real>(&self, stacked: &[T]) -> Vec<ProjectionImage<T>> {
        let mut out = Vec::with_capacity(self.geoms.len());
        let mut at = 0;
        for (i, g) in self.geoms.iter().enumerate() {
            let n = g.n_pixels();
            out.push(ProjectionImage { view_id: i, geometry: *g, data: stacked[at..at + n].to_vec() });
            at += n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(primary: f64, secondary: f64, det: usize, du: f64) -> ProjectionGeometry {
        ProjectionGeometry {
            dsd: 1100.0,
            dso: 750.0,
            primary_deg: primary,
            secondary_deg: secondary,
            det_u: det,
            det_v: det,
            du,
            dv: du,
        }
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let grid = GridSpec::cubic(8, 1.0).unwrap();
        let vol = VolumeGrid::<f64>::zeros(grid);
        let imgs = forward_project(&vol, &[view(0.0, 0.0, 16, 1.0)], &Default::default(), &Default::default()).unwrap();
        assert!(imgs[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_chord_of_unit_cube() {
        let grid = GridSpec::cubic(45, 1.0).unwrap();
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = 1.0);
        let g = view(0.0, 0.0, 3, 1.0);
        let imgs = forward_project(&vol, &[g], &Default::default(), &Default::default()).unwrap();
        let center = imgs[0].get(1, 1);
        assert!((center - 45.0).abs() <= 0.5, "center pixel {center}");
        let cached = SystemMatrix::build(&grid, &[g], &Default::default()).unwrap();
        let mut out = vec![0.0; 9];
        cached.apply(&vol.data, &mut out).unwrap();
        assert!((out[4] - center).abs() < 1e-4);
    }

    #[test]
    fn adjoint_identity() {
        let grid = GridSpec::new([10, 9, 8], [1.0, 1.2, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geoms = [view(30.0, 10.0, 12, 1.2), view(-60.0, 20.0, 10, 1.5)];
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let imgs: Vec<ProjectionImage<f64>> = geoms
            .iter()
            .enumerate()
            .map(|(i, g)| ProjectionImage {
                view_id: i,
                geometry: *g,
                data: (0..g.n_pixels()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let cfg = ProjectorConfig::default();
        for reduction in [Reduction::Deterministic, Reduction::Fast] {
            let exec = ExecConfig { reduction, ..Default::default() };
            let px = forward_project(&vol, &geoms, &cfg, &exec).unwrap();
            let bty = backproject(&imgs, &grid, &cfg, &exec).unwrap();
            let lhs: f64 = px.iter().zip(&imgs).map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>()).sum();
            let rhs: f64 = vol.data.iter().zip(&bty.data).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn cached_operator_matches_on_the_fly() {
        let grid = GridSpec::cubic(9, 1.1).unwrap();
        let geoms = [view(0.0, 0.0, 14, 1.0), view(90.0, 0.0, 14, 1.0)];
        let cfg = ProjectorConfig::default();
        let a = SystemMatrix::build(&grid, &geoms, &cfg).unwrap();
        assert!(a.bytes() <= SystemMatrix::estimate_bytes(&grid, &geoms, &cfg).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let px = forward_project(&vol, &geoms, &cfg, &Default::default()).unwrap();
        let mut out = vec![0.0; a.n_rows()];
        a.apply(&vol.data, &mut out).unwrap();
        let flat: Vec<f64> = px.iter().flat_map(|i| i.data.clone()).collect();
        for (x, y) in flat.iter().zip(&out) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        let y: Vec<f64> = (0..a.n_rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut aty = vec![0.0; grid.len()];
        a.apply_transpose(&y, &mut aty).unwrap();
        let lhs: f64 = out.iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = vol.data.iter().zip(&aty).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        let bp = backproject(&a.split_views(&y), &grid, &cfg, &Default::default()).unwrap();
        for (x, y) in bp.data.iter().zip(&aty) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_pixel_backprojection_stays_on_its_ray() {
        let grid = GridSpec::cubic(12, 1.0).unwrap();
        let g = view(20.0, 5.0, 9, 1.5);
        let mut img = ProjectionImage::<f64>::zeros(0, g);
        img.data[4 * 9 + 3] = 1.0;
        let bp = backproject(&[img], &grid, &Default::default(), &Default::default()).unwrap();
        let ray = ray_unchecked(&build_pose(&g), &g, 3, 4);
        let mut touched = 0;
        for (o, &v) in bp.data.iter().enumerate() {
            if v != 0.0 {
                touched += 1;
                let p = grid.position(grid.unravel(o));
                let d = crate::geometry::sub(p, ray.origin);
                let along = crate::geometry::dot(d, ray.dir);
                let perp = crate::geometry::norm(crate::geometry::sub(d, crate::geometry::scale(ray.dir, along)));
                assert!(perp <= 3f64.sqrt() + 1e-9, "voxel {o} is {perp} mm off the ray");
            }
        }
        assert!(touched > 0);
    }

    #[test]
    fn missing_rays_are_zero() {
        let grid = GridSpec::cubic(4, 1.0).unwrap();
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = 1.0);
        let imgs = forward_project(&vol, &[view(0.0, 0.0, 40, 2.0)], &Default::default(), &Default::default()).unwrap();
        assert_eq!(imgs[0].get(0, 0), 0.0);
        assert!(imgs[0].get(20, 20) > 0.0);
    }

    #[test]
    fn mismatched_images_are_rejected() {
        let grid = GridSpec::cubic(4, 1.0).unwrap();
        let img = ProjectionImage { view_id: 0, geometry: view(0.0, 0.0, 4, 1.0), data: vec![0.0f64; 5] };
        assert!(backproject(&[img], &grid, &Default::default(), &Default::default()).is_err());
        assert!(ProjectorConfig::with_step(0.0).step_for(&grid).is_err());
    }
}
