//! Multiresolution hash encoding of normalized coordinates.
//!
//! Each of `L` levels owns a table of `T` feature vectors of width `F`. A
//! query is mapped into the unit cube, scaled to the level's lattice of
//! resolution `N_l = floor(N_min * b^l)`, and the `2^3` corners of its cell
//! are addressed either densely (when the whole lattice fits in the table)
//! or through an XOR spatial hash. The trilinearly interpolated features of
//! all levels are concatenated in level order.
//!
//! Collisions are left to the optimizer: colliding corners simply share an
//! entry, and their gradients add up.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::exec;
use crate::geometry::{GridSpec, Vec3};
use crate::{Error, Real, Result};

/// Per-axis multipliers of the spatial hash.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Half-width of the uniform table initialization.
pub const TABLE_INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashEncoderConfig {
    /// Number of levels `L`.
    pub levels: usize,
    /// `log2(T)`; table size is always a power of two.
    pub log2_table_size: u32,
    /// Features per entry `F`.
    pub features: usize,
    /// Coarsest resolution `N_min`.
    pub base_resolution: usize,
    /// Growth factor `b`.
    pub growth: f64,
    /// Input dimension `d`; only 3 is supported.
    pub input_dim: usize,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            log2_table_size: 19,
            features: 2,
            base_resolution: 16,
            growth: 2.0,
            input_dim: 3,
        }
    }
}

impl HashEncoderConfig {
    #[inline]
    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    /// Trainable parameter count `L * T * F`.
    pub fn param_count(&self) -> usize {
        self.levels * self.table_size() * self.features
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("levels", "must be >= 1"));
        }
        if self.log2_table_size > 30 {
            return Err(Error::invalid("log2_table_size", "must be <= 30"));
        }
        if self.features == 0 {
            return Err(Error::invalid("features", "must be >= 1"));
        }
        if self.base_resolution == 0 {
            return Err(Error::invalid("base_resolution", "must be >= 1"));
        }
        if !(self.growth > 1.0) || !self.growth.is_finite() {
            return Err(Error::invalid("growth", format!("must be finite and > 1, got {}", self.growth)));
        }
        if self.input_dim != 3 {
            return Err(Error::invalid("input_dim", format!("must be 3, got {}", self.input_dim)));
        }
        let top = self.base_resolution as f64 * self.growth.powi(self.levels as i32 - 1);
        if top >= (1u64 << 40) as f64 {
            return Err(Error::invalid("levels", format!("finest resolution {top} is too large")));
        }
        Ok(())
    }

    /// `N_l = floor(N_min * b^l)`.
    pub fn level_resolution(&self, level: usize) -> Result<usize> {
        if level >= self.levels {
            return Err(Error::invalid(
                "level",
                format!("level {level} out of range for {} levels", self.levels),
            ));
        }
        Ok(resolution(self.base_resolution, self.growth, level))
    }

    pub fn addressing(&self, level: usize) -> Result<LevelAddressing> {
        let n = self.level_resolution(level)?;
        let side = n as u128 + 1;
        Ok(LevelAddressing { level, resolution: n, dense: side * side * side <= self.table_size() as u128 })
    }
}

fn resolution(base: usize, growth: f64, level: usize) -> usize {
    (base as f64 * growth.powi(level as i32)).floor() as usize
}

/// How one level maps lattice vertices to table entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelAddressing {
    pub level: usize,
    pub resolution: usize,
    /// True iff `(N_l + 1)^3 <= T`, in which case addressing is collision-free.
    pub dense: bool,
}

impl LevelAddressing {
    #[inline]
    fn index(&self, v: [u64; 3], table_size: usize) -> usize {
        if self.dense {
            let side = self.resolution as u64 + 1;
            ((v[0] * side + v[1]) * side + v[2]) as usize
        } else {
            spatial_hash(v, table_size)
        }
    }
}

/// `(XOR_i v_i * pi_i) mod T`, with wrapping 64-bit products.
#[inline]
pub fn spatial_hash(v: [u64; 3], table_size: usize) -> usize {
    let h = v[0].wrapping_mul(HASH_PRIMES[0])
        ^ v[1].wrapping_mul(HASH_PRIMES[1])
        ^ v[2].wrapping_mul(HASH_PRIMES[2]);
    if table_size.is_power_of_two() {
        (h & (table_size as u64 - 1)) as usize
    } else {
        (h % table_size as u64) as usize
    }
}

/// Cell index and fractional offset of a unit coordinate on an `n`-cell
/// axis; the upper boundary belongs to the last cell.
#[inline]
fn axis_cell(unit: f64, n: usize) -> (u64, f64) {
    let pos = unit * n as f64;
    let mut i = pos.floor();
    if i >= n as f64 {
        i = n as f64 - 1.0;
    }
    if i < 0.0 {
        i = 0.0;
    }
    (i as u64, pos - i)
}

/// Per-axis addressing terms of one lattice coordinate at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AxisTerm {
    /// Contribution of the lower / upper corner to the table index.
    term: [u64; 2],
    /// Interpolation weight of the lower / upper corner.
    weight: [f64; 2],
}

/// Precomputed addressing for the voxel lattice of one grid.
///
/// Lattice coordinates are separable, and so is the addressing: a dense
/// index is a sum of per-axis terms and a hashed one is an XOR of per-axis
/// products. The plan stores those terms per level and axis, so encoding a
/// voxel only combines table lookups. Results are bitwise identical to
/// [`HashEncoder::encode_unit`] on [`lattice_units`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePlan {
    dims: [usize; 3],
    /// `[level][axis]` -> one term per coordinate along the axis.
    axes: Vec<[Vec<AxisTerm>; 3]>,
    dense: Vec<bool>,
    table_size: usize,
}

impl LatticePlan {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn lookup(&self, level: usize, idx: [usize; 3]) -> ([usize; 8], [f64; 8]) {
        let ax = &self.axes[level];
        let (ex, ey, ez) = (ax[0][idx[0]], ax[1][idx[1]], ax[2][idx[2]]);
        let mut entries = [0usize; 8];
        let mut weights = [0.0f64; 8];
        let dense = self.dense[level];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            entries[c] = if dense {
                (ex.term[dx] + ey.term[dy] + ez.term[dz]) as usize
            } else {
                let h = ex.term[dx] ^ ey.term[dy] ^ ez.term[dz];
                if self.table_size.is_power_of_two() {
                    (h & (self.table_size as u64 - 1)) as usize
                } else {
                    (h % self.table_size as u64) as usize
                }
            };
            weights[c] = 1.0 * ex.weight[dx] * ey.weight[dy] * ez.weight[dz];
        }
        (entries, weights)
    }
}

pub fn vertex_entry_index(cfg: &HashEncoderConfig, level: usize, vertex: [u64; 3]) -> Result<usize> {
    let a = cfg.addressing(level)?;
    let n = a.resolution as u64;
    if vertex.iter().any(|&c| c > n) {
        return Err(Error::IndexOutOfRange {
            index: [vertex[0] as i64, vertex[1] as i64, vertex[2] as i64],
            bounds: [n as i64 + 1; 3],
        });
    }
    Ok(a.index(vertex, cfg.table_size()))
}

/// Trainable tables `Theta`, laid out `[level][entry][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashTables<T> {
    pub config: HashEncoderConfig,
    pub data: Vec<T>,
}

impl<T: Real> HashTables<T> {
    pub fn zeros(config: HashEncoderConfig) -> Self {
        Self { config, data: vec![T::zero(); config.param_count()] }
    }

    /// Uniform in `[-TABLE_INIT_SCALE, TABLE_INIT_SCALE]`.
    pub fn random<R: Rng + ?Sized>(config: HashEncoderConfig, rng: &mut R) -> Self {
        let data = (0..config.param_count())
            .map(|_| T::cast(rng.random_range(-TABLE_INIT_SCALE..=TABLE_INIT_SCALE)))
            .collect();
        Self { config, data }
    }

    pub fn level(&self, level: usize) -> &[T] {
        let stride = self.config.table_size() * self.config.features;
        &self.data[level * stride..(level + 1) * stride]
    }

    pub fn entry(&self, level: usize, entry: usize) -> &[T] {
        let f = self.config.features;
        let base = (level * self.config.table_size() + entry) * f;
        &self.data[base..base + f]
    }

    pub fn entry_mut(&mut self, level: usize, entry: usize) -> &mut [T] {
        let f = self.config.features;
        let base = (level * self.config.table_size() + entry) * f;
        &mut self.data[base..base + f]
    }
}

/// The 8 table entries and trilinear weights of one query at one level.
/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLookup {
    pub entries: [usize; 8],
    pub weights: [f64; 8],
}

/// Sparse gradient over the tables, one row per touched `(level, entry)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTableGrad<T> {
    /// `(level, entry, feature gradient)` sorted by level then entry.
    pub rows: Vec<(usize, usize, Vec<T>)>,
}

impl<T: Real> SparseTableGrad<T> {
    pub fn to_dense(&self, config: &HashEncoderConfig) -> Vec<T> {
        let mut out = vec![T::zero(); config.param_count()];
        for (l, e, g) in &self.rows {
            let base = (l * config.table_size() + e) * config.features;
            for (o, &v) in out[base..base + config.features].iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }
}

/// Validated encoder with per-level addressing resolved up front.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoder {
    config: HashEncoderConfig,
    levels: Vec<LevelAddressing>,
}

impl HashEncoder {
    pub fn new(config: HashEncoderConfig) -> Result<Self> {
        config.validate()?;
        let levels = (0..config.levels).map(|l| config.addressing(l)).collect::<Result<Vec<_>>>()?;
        Ok(Self { config, levels })
    }

    pub fn config(&self) -> &HashEncoderConfig {
        &self.config
    }

    pub fn levels(&self) -> &[LevelAddressing] {
        &self.levels
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Cell corners and weights for a unit-cube point. Points on the upper
    /// boundary fall into the last cell.
    #[inline]
    pub fn cell(&self, level: usize, unit: Vec3) -> CellLookup {
        let a = &self.levels[level];
        let n = a.resolution;
        let mut base = [0u64; 3];
        let mut frac = [0.0f64; 3];
        for ax in 0..3 {
            (base[ax], frac[ax]) = axis_cell(unit[ax], n);
        }
        let t = self.config.table_size();
        let mut entries = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for c in 0..8 {
            let d = [(c & 1) as u64, ((c >> 1) & 1) as u64, ((c >> 2) & 1) as u64];
            let v = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            entries[c] = a.index(v, t);
            let mut w = 1.0;
            for ax in 0..3 {
                w *= if d[ax] == 1 { frac[ax] } else { 1.0 - frac[ax] };
            }
            weights[c] = w;
        }
        CellLookup { entries, weights }
    }

    /// Encode a unit-cube point into `out` (length `L * F`).
    pub fn encode_unit<T: Real>(&self, tables: &[T], unit: Vec3, out: &mut [T]) {
        let f = self.config.features;
        let t = self.config.table_size();
        for l in 0..self.config.levels {
            let cell = self.cell(l, unit);
            let table = &tables[l * t * f..(l + 1) * t * f];
            let dst = &mut out[l * f..(l + 1) * f];
            dst.fill(T::zero());
            for c in 0..8 {
                let w = T::cast(cell.weights[c]);
                let row = &table[cell.entries[c] * f..cell.entries[c] * f + f];
                for k in 0..f {
                    dst[k] += w * row[k];
                }
            }
        }
    }

    /// Add the table gradient of `<encode(x), upstream>` into `grad` (dense).
    pub fn backward_unit<T: Real>(&self, unit: Vec3, upstream: &[T], grad: &mut [T]) {
        let f = self.config.features;
        let t = self.config.table_size();
        for l in 0..self.config.levels {
            let cell = self.cell(l, unit);
            let g = &upstream[l * f..(l + 1) * f];
            let table = &mut grad[l * t * f..(l + 1) * t * f];
            for c in 0..8 {
                let w = T::cast(cell.weights[c]);
                let row = &mut table[cell.entries[c] * f..cell.entries[c] * f + f];
                for k in 0..f {
                    row[k] += w * g[k];
                }
            }
        }
    }

    /// Encode one normalized (mm) coordinate of `grid`.
    pub fn encode<T: Real>(&self, tables: &HashTables<T>, x_norm: Vec3, grid: &GridSpec) -> Result<Vec<T>> {
        self.check_tables(tables)?;
        let unit = unit_cube(x_norm, grid)?;
        let mut out = vec![T::zero(); self.output_dim()];
        self.encode_unit(&tables.data, unit, &mut out);
        Ok(out)
    }

    /// Sparse table gradient of `<encode(x), upstream>`.
    pub fn encode_backward<T: Real>(
        &self,
        x_norm: Vec3,
        grid: &GridSpec,
        upstream: &[T],
    ) -> Result<SparseTableGrad<T>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream gradient has {} values, encoder emits {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let unit = unit_cube(x_norm, grid)?;
        let f = self.config.features;
        let mut rows: Vec<(usize, usize, Vec<T>)> = Vec::with_capacity(8 * self.config.levels);
        for l in 0..self.config.levels {
            let cell = self.cell(l, unit);
            let g = &upstream[l * f..(l + 1) * f];
            let mut level_rows: Vec<(usize, usize, Vec<T>)> = Vec::with_capacity(8);
            for c in 0..8 {
                let w = T::cast(cell.weights[c]);
                let e = cell.entries[c];
                match level_rows.iter_mut().find(|r| r.1 == e) {
                    Some(r) => {
                        for k in 0..f {
                            r.2[k] += w * g[k];
                        }
                    }
                    None => level_rows.push((l, e, g.iter().map(|&v| w * v).collect())),
                }
            }
            level_rows.sort_by_key(|r| r.1);
            rows.extend(level_rows);
        }
        Ok(SparseTableGrad { rows })
    }

    /// Encode a batch of unit-cube points into a row-major `B x (L*F)` matrix.
    pub fn encode_batch<T: Real>(&self, tables: &[T], units: &[Vec3], out: &mut [T]) {
        let d = self.output_dim();
        for (u, row) in units.iter().zip(out.chunks_exact_mut(d)) {
            self.encode_unit(tables, *u, row);
        }
    }

    /// Accumulate table gradients for a batch. Levels are independent tables,
    /// so they are processed concurrently; within a level points are visited
    /// in order, which keeps the result bitwise reproducible.
    pub fn accumulate_batch_grad<T: Real>(&self, units: &[Vec3], upstream: &[T], grad: &mut [T]) {
        let f = self.config.features;
        let t = self.config.table_size();
        let d = self.output_dim();
        exec::for_each_chunk_mut(grad, t * f, |l, table| {
            for (p, u) in units.iter().enumerate() {
                let g = &upstream[p * d + l * f..p * d + (l + 1) * f];
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let cell = self.cell(l, *u);
                for c in 0..8 {
                    let w = T::cast(cell.weights[c]);
                    let row = &mut table[cell.entries[c] * f..cell.entries[c] * f + f];
                    for k in 0..f {
                        row[k] += w * g[k];
                    }
                }
            }
        });
    }

    /// Addressing plan for the voxel lattice of `grid`.
    pub fn lattice_plan(&self, grid: &GridSpec) -> LatticePlan {
        let t = self.config.table_size();
        let mut axes = Vec::with_capacity(self.levels.len());
        for a in &self.levels {
            let n = a.resolution;
            let side = n as u64 + 1;
            let per_axis = |axis: usize| -> Vec<AxisTerm> {
                (0..grid.dims[axis])
                    .map(|i| {
                        let (b, f) = axis_cell(lattice_unit(grid, axis, i), n);
                        let term = |v: u64| {
                            if a.dense {
                                v * [side * side, side, 1][axis]
                            } else {
                                v.wrapping_mul(HASH_PRIMES[axis])
                            }
                        };
                        AxisTerm { term: [term(b), term(b + 1)], weight: [1.0 - f, f] }
                    })
                    .collect()
            };
            axes.push([per_axis(0), per_axis(1), per_axis(2)]);
        }
        LatticePlan { dims: grid.dims, axes, dense: self.levels.iter().map(|a| a.dense).collect(), table_size: t }
    }

    /// Encode the lattice voxels with storage offsets `lo..lo + out.len() / (L*F)`.
    pub fn encode_lattice<T: Real>(&self, plan: &LatticePlan, tables: &[T], lo: usize, out: &mut [T]) {
        let f = self.config.features;
        let t = self.config.table_size();
        let d = self.output_dim();
        let [nx, ny, _] = plan.dims;
        for (p, row) in out.chunks_exact_mut(d).enumerate() {
            let o = lo + p;
            let idx = [o % nx, (o / nx) % ny, o / (nx * ny)];
            for l in 0..self.config.levels {
                let (entries, weights) = plan.lookup(l, idx);
                let table = &tables[l * t * f..(l + 1) * t * f];
                let dst = &mut row[l * f..(l + 1) * f];
                dst.fill(T::zero());
                for c in 0..8 {
                    let w = T::cast(weights[c]);
                    let src = &table[entries[c] * f..entries[c] * f + f];
                    for k in 0..f {
                        dst[k] += w * src[k];
                    }
                }
            }
        }
    }

    /// Lattice counterpart of [`HashEncoder::accumulate_batch_grad`] for the
    /// voxels with storage offsets `lo..lo + upstream.len() / (L*F)`.
    pub fn accumulate_lattice_grad<T: Real>(&self, plan: &LatticePlan, lo: usize, upstream: &[T], grad: &mut [T]) {
        let f = self.config.features;
        let t = self.config.table_size();
        let d = self.output_dim();
        let [nx, ny, _] = plan.dims;
        exec::for_each_chunk_mut(grad, t * f, |l, table| {
            for (p, up) in upstream.chunks_exact(d).enumerate() {
                let g = &up[l * f..(l + 1) * f];
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let o = lo + p;
                let (entries, weights) = plan.lookup(l, [o % nx, (o / nx) % ny, o / (nx * ny)]);
                for c in 0..8 {
                    let w = T::cast(weights[c]);
                    let row = &mut table[entries[c] * f..entries[c] * f + f];
                    for k in 0..f {
                        row[k] += w * g[k];
                    }
                }
            }
        });
    }

    fn check_tables<T>(&self, tables: &HashTables<T>) -> Result<()> {
        if tables.config != self.config || tables.data.len() != self.config.param_count() {
            return Err(Error::shape("hash tables do not match encoder configuration"));
        }
        Ok(())
    }
}

/// Affine map of the normalized bounding box `[-n', n']` onto `[0, 1]^3`.
/// A degenerate axis (a single voxel) maps to the cube center.
pub fn unit_cube(x_norm: Vec3, grid: &GridSpec) -> Result<Vec3> {
    let h = grid.half_extent();
    let mut u = [0.0; 3];
    for a in 0..3 {
        let tol = 1e-9 * (1.0 + h[a]);
        if !x_norm[a].is_finite() || x_norm[a].abs() > h[a] + tol {
            return Err(Error::OutOfBounds { coord: x_norm });
        }
        u[a] = if h[a] > 0.0 { ((x_norm[a] + h[a]) / (2.0 * h[a])).clamp(0.0, 1.0) } else { 0.5 };
    }
    Ok(u)
}

/// Unit-cube coordinate of lattice index `i` along `axis`.
#[inline]
pub fn lattice_unit(grid: &GridSpec, axis: usize, i: usize) -> f64 {
    let h = grid.half_extent()[axis];
    if h > 0.0 {
        let x = -h + i as f64 * grid.spacing[axis];
        ((x + h) / (2.0 * h)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

/// Unit-cube coordinates of every voxel of `grid`, in storage order.
pub fn lattice_units(grid: &GridSpec) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(grid.len());
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                out.push([lattice_unit(grid, 0, i), lattice_unit(grid, 1, j), lattice_unit(grid, 2, k)]);
            }
        }
    }
    out
}
