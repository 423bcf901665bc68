//! The occupancy field: coordinate encoder composed with the residual MLP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::exec::{self, ExecConfig};
use crate::frequency::FrequencyConfig;
use crate::geometry::{GridSpec, Vec3, VolumeGrid};
use crate::hash_encoding::{lattice_unit, lattice_units, unit_cube, HashEncoder, HashEncoderConfig, HashTables, LatticePlan};
use crate::mlp::{Mlp, MlpConfig, MlpParams, MlpTape};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EncoderConfig {
    Hash(HashEncoderConfig),
    Frequency(FrequencyConfig),
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderConfig::Hash(c) => c.output_dim(),
            EncoderConfig::Frequency(c) => c.output_dim(),
        }
    }

    /// Trainable encoder parameters (zero for the frequency encoder).
    pub fn param_count(&self) -> usize {
        match self {
            EncoderConfig::Hash(c) => c.param_count(),
            EncoderConfig::Frequency(_) => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderConfig::Hash(_) => "hash",
            EncoderConfig::Frequency(_) => "frequency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub encoder: EncoderConfig,
    pub mlp: MlpConfig,
}

impl FieldConfig {
    /// MLP with the given depth and width whose input matches the encoder.
    pub fn new(encoder: EncoderConfig, n_layers: usize, hidden_width: usize) -> Self {
        let mlp = MlpConfig { n_layers, hidden_width, ..MlpConfig::with_input(encoder.output_dim()) };
        Self { encoder, mlp }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.encoder {
            EncoderConfig::Hash(c) => c.validate()?,
            EncoderConfig::Frequency(c) => c.validate()?,
        }
        if self.mlp.in_dim != self.encoder.output_dim() {
            return Err(Error::invalid(
                "mlp.in_dim",
                format!(
                    "MLP expects {} inputs but the encoder emits {}",
                    self.mlp.in_dim,
                    self.encoder.output_dim()
                ),
            ));
        }
        self.mlp.validate()
    }
}

/// Trainable state: encoder tables `Theta` (empty for the frequency encoder)
/// and MLP weights `Phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    pub theta: Vec<T>,
    pub phi: Vec<T>,
}

impl<T: Real> FieldParams<T> {
    pub fn zeros(cfg: &FieldConfig) -> Self {
        Self { theta: vec![T::zero(); cfg.encoder.param_count()], phi: vec![T::zero(); cfg.mlp.param_count()] }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.phi).all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            theta: self.theta.iter().map(|v| U::cast(v.widen())).collect(),
            phi: self.phi.iter().map(|v| U::cast(v.widen())).collect(),
        }
    }
}

/// Seeded initialization: `Theta ~ U(-1e-4, 1e-4)`, Kaiming-uniform `Phi`.
pub fn init_params<T: Real>(cfg: &FieldConfig, seed: u64) -> FieldParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = match cfg.encoder {
        EncoderConfig::Hash(h) => HashTables::<T>::random(h, &mut rng).data,
        EncoderConfig::Frequency(_) => Vec::new(),
    };
    let phi = MlpParams::<T>::kaiming(&cfg.mlp, &mut rng).data;
    FieldParams { theta, phi }
}

/// Encoder plus its precomputed view of the voxel lattice.
#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    Hash { enc: HashEncoder, plan: LatticePlan },
    /// Per-axis channel blocks, `dims[a] x 2K` each.
    Frequency { cfg: FrequencyConfig, axes: [Vec<f64>; 3] },
}

/// Points a batch refers to: storage offsets of the field's voxel lattice,
/// or explicit unit-cube coordinates.
#[derive(Debug, Clone, Copy)]
enum Points<'a> {
    Lattice(usize),
    Units(&'a [Vec3]),
}

impl Points<'_> {
    fn len(&self) -> usize {
        match self {
            Points::Lattice(n) => *n,
            Points::Units(u) => u.len(),
        }
    }
}

impl Encoder {
    fn new(cfg: &EncoderConfig, grid: &GridSpec) -> Result<Self> {
        Ok(match *cfg {
            EncoderConfig::Hash(h) => {
                let enc = HashEncoder::new(h)?;
                let plan = enc.lattice_plan(grid);
                Encoder::Hash { enc, plan }
            }
            EncoderConfig::Frequency(f) => {
                let k2 = f.output_dim() / 3;
                let axes = [0, 1, 2].map(|a| {
                    let mut block = vec![0.0f64; grid.dims[a] * k2];
                    let mut row = vec![0.0f64; f.output_dim()];
                    for i in 0..grid.dims[a] {
                        let mut u = [0.0; 3];
                        u[a] = lattice_unit(grid, a, i);
                        f.encode_unit(u, &mut row);
                        block[i * k2..(i + 1) * k2].copy_from_slice(&row[a * k2..(a + 1) * k2]);
                    }
                    block
                });
                Encoder::Frequency { cfg: f, axes }
            }
        })
    }

    fn output_dim(&self) -> usize {
        match self {
            Encoder::Hash { enc, .. } => enc.output_dim(),
            Encoder::Frequency { cfg, .. } => cfg.output_dim(),
        }
    }

    /// Features of points `lo..lo + out.len() / dim`.
    fn encode<T: Real>(&self, theta: &[T], pts: Points<'_>, dims: [usize; 3], lo: usize, out: &mut [T]) {
        let d = self.output_dim();
        let n = out.len() / d;
        match (self, pts) {
            (Encoder::Hash { enc, plan }, Points::Lattice(_)) => enc.encode_lattice(plan, theta, lo, out),
            (Encoder::Hash { enc, .. }, Points::Units(u)) => enc.encode_batch(theta, &u[lo..lo + n], out),
            (Encoder::Frequency { axes, .. }, Points::Lattice(_)) => {
                let k2 = d / 3;
                let [nx, ny, _] = dims;
                for (p, row) in out.chunks_exact_mut(d).enumerate() {
                    let o = lo + p;
                    let idx = [o % nx, (o / nx) % ny, o / (nx * ny)];
                    for a in 0..3 {
                        let src = &axes[a][idx[a] * k2..(idx[a] + 1) * k2];
                        for (dst, v) in row[a * k2..(a + 1) * k2].iter_mut().zip(src) {
                            *dst = T::cast(*v);
                        }
                    }
                }
            }
            (Encoder::Frequency { cfg, .. }, Points::Units(u)) => {
                for (pt, row) in u[lo..lo + n].iter().zip(out.chunks_exact_mut(d)) {
                    cfg.encode_unit(*pt, row);
                }
            }
        }
    }

    /// Scatter feature gradients of points `lo..` into the table gradient.
    fn scatter<T: Real>(&self, pts: Points<'_>, lo: usize, dx: &[T], grad: &mut [T]) {
        let d = self.output_dim();
        match (self, pts) {
            (Encoder::Hash { enc, plan }, Points::Lattice(_)) => enc.accumulate_lattice_grad(plan, lo, dx, grad),
            (Encoder::Hash { enc, .. }, Points::Units(u)) => {
                enc.accumulate_batch_grad(&u[lo..lo + dx.len() / d], dx, grad)
            }
            (Encoder::Frequency { .. }, _) => {}
        }
    }

    fn trainable(&self) -> bool {
        matches!(self, Encoder::Hash { .. })
    }
}

/// Gradient of a scalar loss with respect to [`FieldParams`].
pub type FieldGrad<T> = FieldParams<T>;

/// Occupancy field bound to a voxel grid.
#[derive(Debug, Clone)]
pub struct NeuralField {
    config: FieldConfig,
    grid: GridSpec,
    encoder: Encoder,
    mlp: Mlp,
}

impl NeuralField {
    pub fn new(config: FieldConfig, grid: GridSpec) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let encoder = Encoder::new(&config.encoder, &grid)?;
        Ok(Self { config, grid, encoder, mlp: Mlp::new(config.mlp)? })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn check<T>(&self, p: &FieldParams<T>) -> Result<()> {
        if p.theta.len() != self.config.encoder.param_count() || p.phi.len() != self.config.mlp.param_count() {
            return Err(Error::shape(format!(
                "field parameters ({} + {}) do not match configuration ({} + {})",
                p.theta.len(),
                p.phi.len(),
                self.config.encoder.param_count(),
                self.config.mlp.param_count()
            )));
        }
        Ok(())
    }

    fn evaluate_points<T: Real>(&self, p: &FieldParams<T>, pts: Points<'_>, exec_cfg: &ExecConfig, out: &mut [T]) {
        let chunk = exec_cfg.chunk_points.max(1);
        let d = self.encoder.output_dim();
        exec::for_each_chunk_mut(&mut out[..pts.len()], chunk, |ci, dst| {
            let mut x = vec![T::zero(); dst.len() * d];
            self.encoder.encode(&p.theta, pts, self.grid.dims, ci * chunk, &mut x);
            self.mlp.forward_batch(&p.phi, &x, dst.len(), dst, None);
        });
    }

    /// Occupancy at unit-cube points, chunked and parallel over points.
    pub fn evaluate_units<T: Real>(&self, p: &FieldParams<T>, units: &[Vec3], exec_cfg: &ExecConfig, out: &mut [T]) {
        self.evaluate_points(p, Points::Units(units), exec_cfg, out);
    }

    /// Occupancy at 1-based voxel indices, in input order.
    pub fn evaluate<T: Real>(&self, p: &FieldParams<T>, indices: &[[usize; 3]], exec_cfg: &ExecConfig) -> Result<Vec<T>> {
        self.check(p)?;
        let units = indices
            .iter()
            .map(|&idx| unit_cube(self.grid.normalize_coords(idx)?, &self.grid))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![T::zero(); units.len()];
        self.evaluate_units(p, &units, exec_cfg, &mut out);
        Ok(out)
    }

    /// Continuous occupancy of every voxel.
    pub fn render<T: Real>(&self, p: &FieldParams<T>, exec_cfg: &ExecConfig) -> Result<VolumeGrid<T>> {
        self.check(p)?;
        let mut data = vec![T::zero(); self.grid.len()];
        self.evaluate_points(p, Points::Lattice(self.grid.len()), exec_cfg, &mut data);
        VolumeGrid::new(self.grid, data)
    }

    /// Gradient of `sum_i upstream[i] * occupancy(units[i])` with respect to
    /// `Theta` and `Phi`.
    pub fn backward_units<T: Real>(
        &self,
        p: &FieldParams<T>,
        units: &[Vec3],
        upstream: &[T],
        exec_cfg: &ExecConfig,
    ) -> FieldGrad<T> {
        self.backward_points(p, Points::Units(units), upstream, exec_cfg)
    }

    /// Gradient of `sum_v upstream[v] * occupancy(v)` over all voxels `v`
    /// of the grid, in storage order.
    pub fn backward_volume<T: Real>(&self, p: &FieldParams<T>, upstream: &[T], exec_cfg: &ExecConfig) -> FieldGrad<T> {
        self.backward_points(p, Points::Lattice(self.grid.len()), upstream, exec_cfg)
    }

    /// Chunk partials are merged in chunk order, so the result does not
    /// depend on the worker count.
    fn backward_points<T: Real>(
        &self,
        p: &FieldParams<T>,
        pts: Points<'_>,
        upstream: &[T],
        exec_cfg: &ExecConfig,
    ) -> FieldGrad<T> {
        let chunk = exec_cfg.chunk_points.max(1);
        let d = self.encoder.output_dim();
        let n = pts.len();
        let trainable = self.encoder.trainable();
        let mut grad = FieldGrad { theta: vec![T::zero(); p.theta.len()], phi: vec![T::zero(); p.phi.len()] };
        exec::reduce_tasks(
            n.div_ceil(chunk),
            crate::Reduction::Deterministic,
            &mut grad,
            |ci| {
                let lo = ci * chunk;
                let hi = (lo + chunk).min(n);
                let b = hi - lo;
                let mut x = vec![T::zero(); b * d];
                self.encoder.encode(&p.theta, pts, self.grid.dims, lo, &mut x);
                let mut tape = MlpTape::default();
                let mut mu = vec![T::zero(); b];
                self.mlp.forward_batch(&p.phi, &x, b, &mut mu, Some(&mut tape));
                let mut gphi = vec![T::zero(); p.phi.len()];
                let mut dx = if trainable { vec![T::zero(); b * d] } else { Vec::new() };
                self.mlp.backward_batch(&p.phi, &tape, &upstream[lo..hi], &mut gphi, trainable.then_some(dx.as_mut_slice()));
                (lo, gphi, dx)
            },
            |acc, (lo, gphi, dx)| {
                for (a, v) in acc.phi.iter_mut().zip(&gphi) {
                    *a += *v;
                }
                if trainable {
                    self.encoder.scatter(pts, lo, &dx, &mut acc.theta);
                }
            },
            |_, _| unreachable!("deterministic reduction never combines partials"),
            || unreachable!("deterministic reduction never creates partials"),
        );
        grad
    }

    /// Sign pattern of every hidden pre-activation over all voxels. The
    /// field is smooth in its parameters wherever this pattern is constant.
    pub fn activation_pattern<T: Real>(&self, p: &FieldParams<T>, exec_cfg: &ExecConfig) -> Vec<bool> {
        let n = self.grid.len();
        let chunk = exec_cfg.chunk_points.max(1);
        let d = self.encoder.output_dim();
        let parts = exec::map_tasks(n.div_ceil(chunk), |ci| {
            let b = ((ci + 1) * chunk).min(n) - ci * chunk;
            let mut x = vec![T::zero(); b * d];
            self.encoder.encode(&p.theta, Points::Lattice(n), self.grid.dims, ci * chunk, &mut x);
            let mut tape = MlpTape::default();
            let mut mu = vec![T::zero(); b];
            self.mlp.forward_batch(&p.phi, &x, b, &mut mu, Some(&mut tape));
            let n = tape.pre.len();
            tape.pre[..n - 1].iter().flat_map(|z| z.iter().map(|v| *v > T::zero())).collect::<Vec<_>>()
        });
        parts.concat()
    }

    pub fn units(&self) -> Vec<Vec3> {
        lattice_units(&self.grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::mlp_forward;
    use rand::Rng;

    fn small_hash() -> FieldConfig {
        let enc = EncoderConfig::Hash(HashEncoderConfig {
            levels: 3,
            log2_table_size: 8,
            features: 2,
            base_resolution: 2,
            growth: 2.0,
            input_dim: 3,
        });
        FieldConfig::new(enc, 4, 8)
    }

    #[test]
    fn evaluation_is_composition_of_stages() {
        let cfg = small_hash();
        let grid = GridSpec::new([5, 4, 6], [1.0, 0.8, 0.6]).unwrap();
        let field = NeuralField::new(cfg, grid).unwrap();
        let mut p = init_params::<f64>(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in p.theta.iter_mut() {
            *t = rng.random_range(-1.0..1.0);
        }
        let idx = [[1, 1, 1], [5, 4, 6], [3, 2, 4]];
        let got = field.evaluate(&p, &idx, &ExecConfig::default()).unwrap();
        let EncoderConfig::Hash(hc) = cfg.encoder else { unreachable!() };
        let enc = HashEncoder::new(hc).unwrap();
        let tables = HashTables { config: hc, data: p.theta.clone() };
        let mlp_params = MlpParams { shapes: cfg.mlp.layer_shapes(), data: p.phi.clone() };
        for (k, i) in idx.iter().enumerate() {
            let x = grid.normalize_coords(*i).unwrap();
            let feats = enc.encode(&tables, x, &grid).unwrap();
            let (mu, _) = mlp_forward(&cfg.mlp, &mlp_params, &feats).unwrap();
            assert!((mu - got[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_evaluation_is_bitwise_identical() {
        let cfg = small_hash();
        let grid = GridSpec::cubic(6, 1.0).unwrap();
        let field = NeuralField::new(cfg, grid).unwrap();
        let p = init_params::<f32>(&cfg, 1);
        let exec = ExecConfig { chunk_points: 17, ..Default::default() };
        let a = field.render(&p, &exec).unwrap();
        let b = field.render(&p, &exec).unwrap();
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn outputs_stay_in_open_unit_interval() {
        let cfg = small_hash();
        let grid = GridSpec::cubic(22, 1.0).unwrap();
        let field = NeuralField::new(cfg, grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = init_params::<f32>(&cfg, 3);
        for v in p.theta.iter_mut().chain(p.phi.iter_mut()) {
            *v = rng.random_range(-5.0..5.0);
        }
        let idx: Vec<[usize; 3]> = (0..10_000)
            .map(|_| [rng.random_range(1..=22), rng.random_range(1..=22), rng.random_range(1..=22)])
            .collect();
        let out = field.evaluate(&p, &idx, &ExecConfig::default()).unwrap();
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn initial_field_is_near_half() {
        let enc = EncoderConfig::Hash(HashEncoderConfig { log2_table_size: 14, ..Default::default() });
        let cfg = FieldConfig::new(enc, 8, 64);
        let grid = GridSpec::cubic(32, 1.0).unwrap();
        let field = NeuralField::new(cfg, grid).unwrap();
        let p = init_params::<f32>(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<[usize; 3]> = (0..1000)
            .map(|_| [rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=32)])
            .collect();
        let out = field.evaluate(&p, &idx, &ExecConfig::default()).unwrap();
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let cfg = small_hash();
        let a = init_params::<f32>(&cfg, 9);
        let b = init_params::<f32>(&cfg, 9);
        assert_eq!(a, b);
        assert_eq!(a.theta.len(), 3 * 256 * 2);
        assert_eq!(a.phi.len(), cfg.mlp.param_count());
        assert!(a.theta.iter().all(|v| v.abs() <= 1e-4));
        assert_ne!(a, init_params::<f32>(&cfg, 10));
    }

    #[test]
    fn zero_mlp_renders_half_everywhere() {
        let cfg = small_hash();
        let grid = GridSpec::new([3, 4, 5], [1.0; 3]).unwrap();
        let field = NeuralField::new(cfg, grid).unwrap();
        let mut p = init_params::<f32>(&cfg, 0);
        p.phi.iter_mut().for_each(|v| *v = 0.0);
        let vol = field.render(&p, &ExecConfig::default()).unwrap();
        assert_eq!(vol.spec.dims, [3, 4, 5]);
        assert!(vol.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for cfg in [small_hash(), FieldConfig::new(EncoderConfig::Frequency(FrequencyConfig { frequencies: 2 }), 3, 6)] {
            let grid = GridSpec::cubic(4, 1.0).unwrap();
            let field = NeuralField::new(cfg, grid).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut p = init_params::<f64>(&cfg, 5);
            for t in p.theta.iter_mut() {
                *t = rng.random_range(-0.5..0.5);
            }
            let units = field.units();
            let up: Vec<f64> = (0..units.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exec = ExecConfig { chunk_points: 7, ..Default::default() };
            let g = field.backward_units(&p, &units, &up, &exec);
            let f = |p: &FieldParams<f64>| {
                let mut out = vec![0.0; units.len()];
                field.evaluate_units(p, &units, &exec, &mut out);
                out.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let h = 1e-5;
            let n_theta = p.theta.len();
            for k in 0..40 {
                let i = rng.random_range(0..n_theta + p.phi.len());
                let (mut a, mut b) = (p.clone(), p.clone());
                let an = if i < n_theta {
                    a.theta[i] += h;
                    b.theta[i] -= h;
                    g.theta[i]
                } else {
                    a.phi[i - n_theta] += h;
                    b.phi[i - n_theta] -= h;
                    g.phi[i - n_theta]
                };
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
                assert!(err < 1e-5, "sample {k} param {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn lattice_paths_match_explicit_points() {
        for cfg in [small_hash(), FieldConfig::new(EncoderConfig::Frequency(FrequencyConfig { frequencies: 3 }), 3, 6)] {
            let grid = GridSpec::new([5, 6, 4], [1.0, 0.7, 1.2]).unwrap();
            let field = NeuralField::new(cfg, grid).unwrap();
            let p = init_params::<f64>(&cfg, 2);
            let exec = ExecConfig { chunk_points: 13, ..Default::default() };
            let units = field.units();
            let mut a = vec![0.0; units.len()];
            field.evaluate_units(&p, &units, &exec, &mut a);
            assert_eq!(field.render(&p, &exec).unwrap().data, a);
            let up: Vec<f64> = (0..units.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            assert_eq!(field.backward_units(&p, &units, &up, &exec), field.backward_volume(&p, &up, &exec));
        }
    }
}
