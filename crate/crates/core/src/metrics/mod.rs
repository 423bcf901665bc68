//! Reconstruction quality metrics.
//!
//! Binary volumes are [`BinaryVolume`] masks. Metrics whose value is
//! undefined for the given inputs (empty skeleton, empty point set, all-zero
//! reference) return `None` rather than a sentinel.

mod chamfer;
mod skeleton;

use alloc::format;
use alloc::vec::Vec;

pub use chamfer::{mean_nearest_dist2_brute, PointGrid};
pub use skeleton::{count_components_26, is_simple, label_components_26, skeletonize_3d};

use crate::geometry::{BinaryVolume, Vec3, VolumeGrid};
use crate::{Error, Real, Result};

/// Name of the thinning variant, recorded alongside clDice values.
pub const SKELETON_METHOD: &str = "directional-simple-point-thinning-26/6";

fn same_shape<A, B>(a: &VolumeGrid<A>, b: &VolumeGrid<B>) -> Result<()> {
    if a.spec.dims != b.spec.dims || a.data.len() != b.data.len() {
        return Err(Error::shape(format!("volume dims {:?} vs {:?}", a.spec.dims, b.spec.dims)));
    }
    Ok(())
}

/// `(dice, iou)`; both are 1 when both masks are empty.
pub fn overlap_metrics(r: &BinaryVolume, g: &BinaryVolume) -> Result<(f64, f64)> {
    same_shape(r, g)?;
    let (mut nr, mut ng, mut inter) = (0usize, 0usize, 0usize);
    for (&a, &b) in r.data.iter().zip(&g.data) {
        let (a, b) = (a != 0, b != 0);
        nr += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    if nr + ng == 0 {
        return Ok((1.0, 1.0));
    }
    let union = nr + ng - inter;
    Ok((2.0 * inter as f64 / (nr + ng) as f64, inter as f64 / union as f64))
}

fn contained_fraction(skel: &BinaryVolume, other: &BinaryVolume) -> Option<f64> {
    let n = skel.count_nonzero();
    if n == 0 {
        return None;
    }
    let hit = skel.data.iter().zip(&other.data).filter(|(s, o)| **s != 0 && **o != 0).count();
    Some(hit as f64 / n as f64)
}

/// Centerline Dice from precomputed skeletons.
pub fn cl_dice_with_skeletons(
    r: &BinaryVolume,
    skel_r: &BinaryVolume,
    g: &BinaryVolume,
    skel_g: &BinaryVolume,
) -> Result<Option<f64>> {
    same_shape(r, g)?;
    same_shape(r, skel_r)?;
    same_shape(g, skel_g)?;
    let (Some(tprec), Some(tsens)) = (contained_fraction(skel_r, g), contained_fraction(skel_g, r)) else {
        return Ok(None);
    };
    if tprec + tsens == 0.0 {
        return Ok(Some(0.0));
    }
    Ok(Some(2.0 * tprec * tsens / (tprec + tsens)))
}

/// Harmonic mean of topology precision and sensitivity; `None` when either
/// skeleton is empty.
pub fn cl_dice(r: &BinaryVolume, g: &BinaryVolume) -> Result<Option<f64>> {
    same_shape(r, g)?;
    cl_dice_with_skeletons(r, &skeletonize_3d(r), g, &skeletonize_3d(g))
}

/// Physical centers of the foreground voxels, in storage order.
pub fn foreground_points(v: &BinaryVolume) -> Vec<Vec3> {
    v.data
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0)
        .map(|(o, _)| v.spec.position(v.spec.unravel(o)))
        .collect()
}

/// Symmetric Chamfer distance between point sets:
/// half the sum of the two mean squared nearest-neighbor distances.
pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (ga, gb) = (PointGrid::new(a), PointGrid::new(b));
    Some(0.5 * (chamfer::mean_nearest_dist2(a, &gb) + chamfer::mean_nearest_dist2(b, &ga)))
}

/// Chamfer distance between the foreground voxel centers, in mm².
pub fn chamfer_l2(r: &BinaryVolume, g: &BinaryVolume) -> Result<Option<f64>> {
    same_shape(r, g)?;
    Ok(chamfer_points(&foreground_points(r), &foreground_points(g)))
}

/// `sum (R - G)^2 / sum G^2`; `None` when `G` is all zero.
pub fn re_error<A: Real, B: Real>(r: &VolumeGrid<A>, g: &VolumeGrid<B>) -> Result<Option<f64>> {
    same_shape(r, g)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (a, b) in r.data.iter().zip(&g.data) {
        let (a, b) = (a.widen(), b.widen());
        num += (a - b) * (a - b);
        den += b * b;
    }
    Ok((den > 0.0).then(|| num / den))
}

/// Mean squared voxel difference.
pub fn re_mse<A: Real, B: Real>(r: &VolumeGrid<A>, g: &VolumeGrid<B>) -> Result<f64> {
    same_shape(r, g)?;
    let s: f64 = r
        .data
        .iter()
        .zip(&g.data)
        .map(|(a, b)| {
            let d = a.widen() - b.widen();
            d * d
        })
        .sum();
    Ok(s / r.data.len() as f64)
}

/// Ground truth with its skeleton computed once.
#[derive(Debug, Clone)]
pub struct Reference {
    pub mask: BinaryVolume,
    pub skeleton: BinaryVolume,
    points: Vec<Vec3>,
}

impl Reference {
    pub fn new(mask: BinaryVolume) -> Self {
        let skeleton = skeletonize_3d(&mask);
        let points = foreground_points(&mask);
        Self { mask, skeleton, points }
    }
}

/// All metrics of one reconstruction at one binarization threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub cl_dice: Option<f64>,
    pub dice: f64,
    pub iou: f64,
    /// On the binarized reconstruction.
    pub re_error: Option<f64>,
    pub chamfer_l2: Option<f64>,
    /// On the binarized reconstruction.
    pub re_mse: f64,
    /// On the continuous occupancy, before binarization.
    pub re_error_continuous: Option<f64>,
    pub re_mse_continuous: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "threshold",
        "clDice",
        "Dice",
        "IoU",
        "reError",
        "CD_l2",
        "reMSE",
        "reError_continuous",
        "reMSE_continuous",
    ];

    /// Values in [`Self::CSV_HEADER`] order; undefined values are `None`.
    pub fn values(&self) -> [Option<f64>; 9] {
        [
            Some(self.threshold),
            self.cl_dice,
            Some(self.dice),
            Some(self.iou),
            self.re_error,
            self.chamfer_l2,
            Some(self.re_mse),
            self.re_error_continuous,
            Some(self.re_mse_continuous),
        ]
    }
}

/// Binarize a continuous reconstruction at `threshold` and score it.
pub fn evaluate<T: Real>(recon: &VolumeGrid<T>, reference: &Reference, threshold: f64) -> Result<MetricsReport> {
    same_shape(recon, &reference.mask)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    let mask = recon.to_mask(threshold);
    let g = &reference.mask;
    let (dice, iou) = overlap_metrics(&mask, g)?;
    let cl = cl_dice_with_skeletons(&mask, &skeletonize_3d(&mask), g, &reference.skeleton)?;
    let rp = foreground_points(&mask);
    let chamfer = chamfer_points(&rp, &reference.points);
    let gr = g.to_real::<f64>();
    let mr = mask.to_real::<f64>();
    Ok(MetricsReport {
        threshold,
        cl_dice: cl,
        dice,
        iou,
        re_error: re_error(&mr, &gr)?,
        chamfer_l2: chamfer,
        re_mse: re_mse(&mr, &gr)?,
        re_error_continuous: re_error(recon, &gr)?,
        re_mse_continuous: re_mse(recon, &gr)?,
    })
}
