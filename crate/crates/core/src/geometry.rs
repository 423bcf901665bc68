//! Voxel grids, coordinate normalization and C-arm pose/ray construction.
//!
//! World frame: millimetres, origin at the volume center. A view at zero
//! angles has its source on `-y` and its detector on `+y`, with detector
//! columns along `+x` and rows along `+z`. The primary angle rotates the
//! source/detector assembly about `+z`; the secondary angle then rotates it
//! about the (already rotated) `+x` axis, i.e. `R = Rz(primary) * Rx(secondary)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::{Error, Real, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Voxel counts and physical spacing of a regular grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Voxel spacing in mm along x, y, z.
    pub spacing: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Self { dims, spacing };
        g.validate()?;
        Ok(g)
    }

    pub fn cubic(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("voxels", format!("counts must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(
                "spacing_mm",
                format!("spacings must be finite and > 0, got {:?}", self.spacing),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n' = (n*s - s) / 2` per axis: the largest normalized coordinate.
    #[inline]
    pub fn half_extent(&self) -> Vec3 {
        let mut h = [0.0; 3];
        for a in 0..3 {
            h[a] = (self.dims[a] as f64 * self.spacing[a] - self.spacing[a]) / 2.0;
        }
        h
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Linear offset of a 0-based voxel index (x fastest).
    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`GridSpec::offset`].
    #[inline]
    pub fn unravel(&self, offset: usize) -> [usize; 3] {
        let i = offset % self.dims[0];
        let r = offset / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// Normalized (origin-centered, mm) position of a 0-based voxel index.
    #[inline]
    pub fn position(&self, idx: [usize; 3]) -> Vec3 {
        let h = self.half_extent();
        [
            -h[0] + idx[0] as f64 * self.spacing[0],
            -h[1] + idx[1] as f64 * self.spacing[1],
            -h[2] + idx[2] as f64 * self.spacing[2],
        ]
    }

    /// Coordinate normalization for 1-based voxel indices.
    pub fn normalize_coords(&self, idx: [usize; 3]) -> Result<Vec3> {
        for a in 0..3 {
            if idx[a] < 1 || idx[a] > self.dims[a] {
                return Err(Error::IndexOutOfRange {
                    index: [idx[0] as i64, idx[1] as i64, idx[2] as i64],
                    bounds: [self.dims[0] as i64, self.dims[1] as i64, self.dims[2] as i64],
                });
            }
        }
        Ok(self.position([idx[0] - 1, idx[1] - 1, idx[2] - 1]))
    }

    /// Box covered by the trilinear interpolant of the voxel samples: the voxel
    /// center lattice grown by one spacing on every side.
    pub fn support_box(&self) -> (Vec3, Vec3) {
        let h = self.half_extent();
        let lo = [-h[0] - self.spacing[0], -h[1] - self.spacing[1], -h[2] - self.spacing[2]];
        (lo, [-lo[0], -lo[1], -lo[2]])
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Scalar volume on a [`GridSpec`], x-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid<T> {
    pub spec: GridSpec,
    pub data: Vec<T>,
}

/// Binary mask volume: voxels are 0 or 1.
pub type BinaryVolume = VolumeGrid<u8>;

impl<T: Copy + Default + PartialEq> VolumeGrid<T> {
    pub fn new(spec: GridSpec, data: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.len() {
            return Err(Error::shape(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                spec.dims,
                spec.len()
            )));
        }
        Ok(Self { spec, data })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, data: vec![T::default(); spec.len()] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.spec.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let o = self.spec.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != T::default()).count()
    }

    pub fn ensure_same_shape<U>(&self, other: &VolumeGrid<U>) -> Result<()> {
        if self.spec.dims != other.spec.dims {
            return Err(Error::shape(format!(
                "volume dims {:?} vs {:?}",
                self.spec.dims, other.spec.dims
            )));
        }
        Ok(())
    }
}

impl<T: Real> VolumeGrid<T> {
    /// True when every voxel is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == T::zero() || v == T::one())
    }

    pub fn cast<U: Real>(&self) -> VolumeGrid<U> {
        VolumeGrid { spec: self.spec, data: self.data.iter().map(|v| U::cast(v.widen())).collect() }
    }

    /// Mask of voxels `>= threshold`.
    pub fn to_mask(&self, threshold: f64) -> BinaryVolume {
        let t = T::cast(threshold);
        VolumeGrid { spec: self.spec, data: self.data.iter().map(|&v| u8::from(v >= t)).collect() }
    }
}

impl BinaryVolume {
    /// Mask as 0.0 / 1.0 values.
    pub fn to_real<T: Real>(&self) -> VolumeGrid<T> {
        VolumeGrid { spec: self.spec, data: self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect() }
    }
}

/// One view of the cone-beam system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionGeometry {
    /// Source-to-detector distance, mm.
    pub dsd: f64,
    /// Source-to-origin distance, mm.
    pub dso: f64,
    pub primary_deg: f64,
    pub secondary_deg: f64,
    pub det_u: usize,
    pub det_v: usize,
    /// Detector pixel spacing, mm.
    pub du: f64,
    pub dv: f64,
}

impl ProjectionGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.dso > 0.0) || !self.dso.is_finite() || !self.dsd.is_finite() {
            return Err(Error::invalid("dso_mm", format!("must be finite and > 0, got {}", self.dso)));
        }
        if !(self.dsd > self.dso) {
            return Err(Error::invalid(
                "dsd_mm/dso_mm",
                format!("dsd_mm ({}) must exceed dso_mm ({})", self.dsd, self.dso),
            ));
        }
        if self.det_u == 0 || self.det_v == 0 {
            return Err(Error::invalid(
                "det_pixels",
                format!("must be >= 1, got [{}, {}]", self.det_u, self.det_v),
            ));
        }
        if !(self.du > 0.0) || !(self.dv > 0.0) || !self.du.is_finite() || !self.dv.is_finite() {
            return Err(Error::invalid(
                "det_spacing_mm",
                format!("must be finite and > 0, got [{}, {}]", self.du, self.dv),
            ));
        }
        if !self.primary_deg.is_finite() || !self.secondary_deg.is_finite() {
            return Err(Error::invalid("primary_deg/secondary_deg", "angles must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.det_u * self.det_v
    }

    /// Human-readable notes for parameters outside the clinical ranges used
    /// to simulate coronary angiograms. These are hints, never errors.
    pub fn clinical_range_notes(&self) -> Vec<alloc::string::String> {
        let mut notes = Vec::new();
        let mut check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v < lo || v > hi {
                notes.push(format!("{name} = {v} outside typical clinical range [{lo}, {hi}]"));
            }
        };
        check("dsd_mm", self.dsd, 970.0, 1160.0);
        check("dso_mm", self.dso, 737.0, 788.0);
        check("primary_deg", self.primary_deg, -47.0, 42.0);
        check("secondary_deg", self.secondary_deg, -8.0, 45.0);
        if self.du == self.dv {
            check("det_spacing_mm", self.du, 0.2769, 0.2789);
        } else {
            check("det_spacing_mm (u)", self.du, 0.2769, 0.2789);
            check("det_spacing_mm (v)", self.dv, 0.2769, 0.2789);
        }
        notes
    }
}

/// Realized source/detector placement of a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub source: Vec3,
    pub det_center: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
}

/// Rotation `Rz(primary) * Rx(secondary)`, applied to column vectors.
fn rotation(primary_deg: f64, secondary_deg: f64) -> [[f64; 3]; 3] {
    let (sp, cp) = primary_deg.to_radians().sin_cos();
    let (ss, cs) = secondary_deg.to_radians().sin_cos();
    let rz = [[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cs, -ss], [0.0, ss, cs]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rz[i][k] * rx[k][j]).sum();
        }
    }
    r
}

fn apply(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
}

pub fn build_pose(g: &ProjectionGeometry) -> Pose {
    let r = rotation(g.primary_deg, g.secondary_deg);
    Pose {
        source: apply(&r, [0.0, -g.dso, 0.0]),
        det_center: apply(&r, [0.0, g.dsd - g.dso, 0.0]),
        u_axis: apply(&r, [1.0, 0.0, 0.0]),
        v_axis: apply(&r, [0.0, 0.0, 1.0]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

/// Center of detector pixel `(u, v)`; pixels are laid out symmetrically
/// around the detector center.
#[inline]
pub fn pixel_center(p: &Pose, g: &ProjectionGeometry, u: usize, v: usize) -> Vec3 {
    let ou = (u as f64 - (g.det_u as f64 - 1.0) / 2.0) * g.du;
    let ov = (v as f64 - (g.det_v as f64 - 1.0) / 2.0) * g.dv;
    add(p.det_center, add(scale(p.u_axis, ou), scale(p.v_axis, ov)))
}

pub fn ray_through_pixel(p: &Pose, g: &ProjectionGeometry, u: usize, v: usize) -> Result<Ray> {
    if u >= g.det_u || v >= g.det_v {
        return Err(Error::IndexOutOfRange {
            index: [u as i64, v as i64, 0],
            bounds: [g.det_u as i64, g.det_v as i64, 1],
        });
    }
    Ok(ray_unchecked(p, g, u, v))
}

#[inline]
pub(crate) fn ray_unchecked(p: &Pose, g: &ProjectionGeometry, u: usize, v: usize) -> Ray {
    let c = pixel_center(p, g, u, v);
    Ray { origin: p.source, dir: normalize(sub(c, p.source)) }
}

/// Slab test against an axis-aligned box; returns the entry/exit parameters
/// when the ray crosses the box with positive length.
pub fn intersect_box(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let d = ray.dir[a];
        let o = ray.origin[a];
        if d.abs() < 1e-300 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut ta, mut tb) = ((lo[a] - o) * inv, (hi[a] - o) * inv);
        if ta > tb {
            core::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}
