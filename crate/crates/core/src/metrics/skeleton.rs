//! Directional 3D thinning with 26-connected foreground and 6-connected
//! background.
//!
//! Each sweep visits the six face directions in turn. A voxel is a deletion
//! candidate in direction `d` when its `d`-neighbor is background, it is not
//! an end point (exactly one foreground 26-neighbor) and it is simple.
//! Candidates are then removed one at a time, re-testing each against the
//! volume as it stands, so every single deletion preserves topology.
//! Sweeps repeat until nothing changes.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::BinaryVolume;

/// Neighborhood offsets in `(dx, dy, dz)` order, index `9*(dz+1) + 3*(dy+1) + (dx+1)`.
const CENTER: usize = 13;

const DIRECTIONS: [[i64; 3]; 6] = [[0, -1, 0], [0, 1, 0], [1, 0, 0], [-1, 0, 0], [0, 0, 1], [0, 0, -1]];

#[inline]
fn nb(dx: i64, dy: i64, dz: i64) -> usize {
    (9 * (dz + 1) + 3 * (dy + 1) + (dx + 1)) as usize
}

#[inline]
fn coords(i: usize) -> [i64; 3] {
    [(i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1]
}

/// Number of 26-connected foreground components among the 26 neighbors.
fn foreground_components(n: &[bool; 27]) -> usize {
    let mut seen = [false; 27];
    let mut count = 0;
    let mut stack = Vec::with_capacity(26);
    for s in 0..27 {
        if s == CENTER || !n[s] || seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(c) = stack.pop() {
            let a = coords(c);
            for t in 0..27 {
                if t == CENTER || !n[t] || seen[t] {
                    continue;
                }
                let b = coords(t);
                if (a[0] - b[0]).abs() <= 1 && (a[1] - b[1]).abs() <= 1 && (a[2] - b[2]).abs() <= 1 {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
    }
    count
}

/// Number of 6-connected background components inside the 18-neighborhood
/// that touch the center through a face.
fn background_components(n: &[bool; 27]) -> usize {
    let in_n18 = |i: usize| {
        let c = coords(i);
        i != CENTER && c.iter().map(|v| v.abs()).sum::<i64>() <= 2
    };
    let mut seen = [false; 27];
    let mut count = 0;
    let mut stack = Vec::with_capacity(18);
    for d in DIRECTIONS {
        let s = nb(d[0], d[1], d[2]);
        if n[s] || seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(c) = stack.pop() {
            let a = coords(c);
            for e in DIRECTIONS {
                let b = [a[0] + e[0], a[1] + e[1], a[2] + e[2]];
                if b.iter().any(|v| v.abs() > 1) {
                    continue;
                }
                let t = nb(b[0], b[1], b[2]);
                if in_n18(t) && !n[t] && !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
    }
    count
}

/// Removing the center leaves the topology of foreground and background unchanged.
pub fn is_simple(n: &[bool; 27]) -> bool {
    foreground_components(n) == 1 && background_components(n) == 1
}

fn is_endpoint(n: &[bool; 27]) -> bool {
    (0..27).filter(|&i| i != CENTER && n[i]).count() == 1
}

/// Zero-padded working copy so neighborhoods never leave the array.
struct Padded {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Padded {
    fn new(v: &BinaryVolume) -> Self {
        let [nx, ny, nz] = v.spec.dims;
        let dims = [nx + 2, ny + 2, nz + 2];
        let mut data = vec![false; dims[0] * dims[1] * dims[2]];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data[(i + 1) + dims[0] * ((j + 1) + dims[1] * (k + 1))] = v.data[v.spec.offset(i, j, k)] != 0;
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    fn at(&self, p: usize, d: [i64; 3]) -> usize {
        (p as i64 + d[0] + self.dims[0] as i64 * (d[1] + self.dims[1] as i64 * d[2])) as usize
    }

    fn neighborhood(&self, p: usize) -> [bool; 27] {
        let mut n = [false; 27];
        for (i, slot) in n.iter_mut().enumerate() {
            *slot = self.data[self.at(p, coords(i))];
        }
        n
    }

    fn deletable(&self, p: usize, dir: [i64; 3]) -> bool {
        if !self.data[p] || self.data[self.at(p, dir)] {
            return false;
        }
        let n = self.neighborhood(p);
        !is_endpoint(&n) && is_simple(&n)
    }
}

/// One-voxel-wide centerline of a binary volume.
pub fn skeletonize_3d(v: &BinaryVolume) -> BinaryVolume {
    let mut w = Padded::new(v);
    let [nx, ny, nz] = v.spec.dims;
    let interior: Vec<usize> = (0..nz)
        .flat_map(|k| (0..ny).flat_map(move |j| (0..nx).map(move |i| (i, j, k))))
        .map(|(i, j, k)| (i + 1) + w.dims[0] * ((j + 1) + w.dims[1] * (k + 1)))
        .collect();
    let mut active: Vec<usize> = interior.iter().copied().filter(|&p| w.data[p]).collect();
    loop {
        let mut changed = false;
        for dir in DIRECTIONS {
            let candidates: Vec<usize> = active.iter().copied().filter(|&p| w.deletable(p, dir)).collect();
            for p in candidates {
                if w.deletable(p, dir) {
                    w.data[p] = false;
                    changed = true;
                }
            }
            active.retain(|&p| w.data[p]);
        }
        if !changed {
            break;
        }
    }
    let mut out = BinaryVolume::zeros(v.spec);
    for (o, &p) in interior.iter().enumerate() {
        out.data[o] = u8::from(w.data[p]);
    }
    out
}

/// Number of 26-connected foreground components.
pub fn count_components_26(v: &BinaryVolume) -> usize {
    label_components_26(v).1
}

/// Component label per voxel (0 for background, 1-based otherwise) and the
/// component count.
pub fn label_components_26(v: &BinaryVolume) -> (Vec<u32>, usize) {
    let [nx, ny, nz] = v.spec.dims;
    let mut labels = vec![0u32; v.data.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..v.data.len() {
        if v.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(c) = stack.pop() {
            let [i, j, k] = v.spec.unravel(c);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (x, y, z) = (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                            continue;
                        }
                        let o = v.spec.offset(x as usize, y as usize, z as usize);
                        if v.data[o] != 0 && labels[o] == 0 {
                            labels[o] = count;
                            stack.push(o);
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}
