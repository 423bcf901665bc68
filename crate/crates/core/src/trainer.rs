//! Self-supervised reconstruction: fit the occupancy field so that the
//! projections of its rendered volume match the measured ones.
//!
//! One iteration renders every voxel, projects, scores the mean squared
//! projection error, backprojects the residual and backpropagates it through
//! the MLP and encoder, then takes one Adam step. The loss recorded for
//! iteration `t` (1-based) is the loss of the parameters before update `t`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::exec::ExecConfig;
use crate::field::{init_params, FieldConfig, FieldGrad, FieldParams, NeuralField};
use crate::geometry::{BinaryVolume, GridSpec, ProjectionGeometry, VolumeGrid};
use crate::metrics::{evaluate, MetricsReport, Reference};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::projector::{backproject, forward_project, ProjectionImage, ProjectorConfig, SystemMatrix};
use crate::{Error, Real, Result};

/// Denominator of the projection loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNorm {
    /// Total pixel count over all views.
    #[default]
    PixelCount,
    /// `views * pixels`, with a fixed per-view pixel count.
    PixelsPerView(usize),
}

impl LossNorm {
    pub fn denominator(&self, geoms: &[ProjectionGeometry]) -> f64 {
        match *self {
            LossNorm::PixelCount => geoms.iter().map(|g| g.n_pixels()).sum::<usize>() as f64,
            LossNorm::PixelsPerView(p) => (geoms.len() * p) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Iterations between metric snapshots.
    pub log_every: usize,
    pub binarize_thresholds: Vec<f64>,
    /// Threshold used for the periodic metric snapshots.
    pub metric_threshold: f64,
    pub loss_norm: LossNorm,
    /// Largest cached projection operator, in bytes; larger problems
    /// project on the fly.
    pub operator_budget_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_every: 100,
            binarize_thresholds: vec![0.4, 0.5, 0.6],
            metric_threshold: 0.5,
            loss_norm: LossNorm::PixelCount,
            operator_budget_bytes: 2 << 30,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.log_every == 0 {
            return Err(Error::invalid("log_every", "must be >= 1"));
        }
        for &t in self.binarize_thresholds.iter().chain(core::iter::once(&self.metric_threshold)) {
            check_threshold(t)?;
        }
        if let LossNorm::PixelsPerView(0) = self.loss_norm {
            return Err(Error::invalid("loss_norm", "pixel count must be >= 1"));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid("threshold", format!("must lie in (0, 1), got {t}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub metrics: Option<MetricsReport>,
}

fn check_pair<T: Real>(p: &[ProjectionImage<T>], g: &[ProjectionImage<T>]) -> Result<()> {
    if p.is_empty() || p.len() != g.len() {
        return Err(Error::shape(format!("{} simulated vs {} measured views", p.len(), g.len())));
    }
    for (a, b) in p.iter().zip(g) {
        if a.data.len() != b.data.len() || a.geometry.det_u != b.geometry.det_u {
            return Err(Error::shape(format!(
                "view {}: {}x{} simulated vs {}x{} measured",
                a.view_id, a.geometry.det_u, a.geometry.det_v, b.geometry.det_u, b.geometry.det_v
            )));
        }
    }
    Ok(())
}

/// Mean squared difference over all pixels of all views.
pub fn mse_loss<T: Real>(p: &[ProjectionImage<T>], g: &[ProjectionImage<T>]) -> Result<f64> {
    mse_loss_with(p, g, LossNorm::PixelCount)
}

pub fn mse_loss_with<T: Real>(p: &[ProjectionImage<T>], g: &[ProjectionImage<T>], norm: LossNorm) -> Result<f64> {
    check_pair(p, g)?;
    let geoms: Vec<ProjectionGeometry> = p.iter().map(|i| i.geometry).collect();
    let s: f64 = p
        .iter()
        .zip(g)
        .flat_map(|(a, b)| a.data.iter().zip(&b.data))
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum();
    Ok(s / norm.denominator(&geoms))
}

/// Voxels `>= threshold` become 1.
pub fn binarize<T: Real>(vol: &VolumeGrid<T>, threshold: f64) -> Result<BinaryVolume> {
    check_threshold(threshold)?;
    Ok(vol.to_mask(threshold))
}

/// Continuous occupancy of every voxel of the field's grid.
pub fn render_volume<T: Real>(field: &NeuralField, params: &FieldParams<T>, exec: &ExecConfig) -> Result<VolumeGrid<T>> {
    field.render(params, exec)
}

/// Projection operator: cached sparse matrix or on-the-fly ray marching.
#[derive(Debug, Clone)]
pub enum Operator {
    Cached(SystemMatrix),
    OnTheFly { grid: GridSpec, geoms: Vec<ProjectionGeometry>, cfg: ProjectorConfig },
}

impl Operator {
    /// Cache the operator when it fits in `budget` bytes.
    pub fn new(grid: &GridSpec, geoms: &[ProjectionGeometry], cfg: &ProjectorConfig, budget: usize) -> Result<Self> {
        if SystemMatrix::estimate_bytes(grid, geoms, cfg)? <= budget {
            Ok(Operator::Cached(SystemMatrix::build(grid, geoms, cfg)?))
        } else {
            Ok(Operator::OnTheFly { grid: *grid, geoms: geoms.to_vec(), cfg: *cfg })
        }
    }

    pub fn is_cached(&self) -> bool {
        matches!(self, Operator::Cached(_))
    }

    /// Stacked pixel values of all views.
    pub fn forward<T: Real>(&self, vol: &VolumeGrid<T>, exec: &ExecConfig) -> Result<Vec<T>> {
        match self {
            Operator::Cached(a) => {
                let mut out = vec![T::zero(); a.n_rows()];
                a.apply(&vol.data, &mut out)?;
                Ok(out)
            }
            Operator::OnTheFly { geoms, cfg, .. } => {
                Ok(forward_project(vol, geoms, cfg, exec)?.into_iter().flat_map(|i| i.data).collect())
            }
        }
    }

    pub fn adjoint<T: Real>(&self, stacked: &[T], exec: &ExecConfig) -> Result<Vec<T>> {
        match self {
            Operator::Cached(a) => {
                let mut out = vec![T::zero(); a.grid().len()];
                a.apply_transpose(stacked, &mut out)?;
                Ok(out)
            }
            Operator::OnTheFly { grid, geoms, cfg } => {
                let mut imgs = Vec::with_capacity(geoms.len());
                let mut at = 0;
                for (i, g) in geoms.iter().enumerate() {
                    let n = g.n_pixels();
                    imgs.push(ProjectionImage { view_id: i, geometry: *g, data: stacked[at..at + n].to_vec() });
                    at += n;
                }
                Ok(backproject(&imgs, grid, cfg, exec)?.data)
            }
        }
    }
}

/// Loss, parameter gradient and rendered volume at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub loss: f64,
    pub grad: FieldGrad<T>,
    pub volume: VolumeGrid<T>,
}

/// Resumable optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub iteration: usize,
    pub params: FieldParams<T>,
    pub adam_theta: AdamState<T>,
    pub adam_phi: AdamState<T>,
}

/// Stateful optimization loop; one [`Reconstructor::step`] per iteration.
pub struct Reconstructor<T: Real> {
    field: NeuralField,
    op: Operator,
    targets: Vec<T>,
    norm: f64,
    cfg: TrainConfig,
    exec: ExecConfig,
    reference: Option<Reference>,
    state: TrainState<T>,
}

impl<T: Real> Reconstructor<T> {
    pub fn new(
        field_cfg: FieldConfig,
        grid: GridSpec,
        inputs: &[ProjectionImage<T>],
        projector: &ProjectorConfig,
        cfg: TrainConfig,
        exec: ExecConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if inputs.is_empty() {
            return Err(Error::invalid("views", "at least one input projection is required"));
        }
        for img in inputs {
            img.validate()?;
            if let Some(v) = img.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("view {} holds {v}", img.view_id)));
            }
        }
        let field = NeuralField::new(field_cfg, grid)?;
        let geoms: Vec<ProjectionGeometry> = inputs.iter().map(|i| i.geometry).collect();
        let op = Operator::new(&grid, &geoms, projector, cfg.operator_budget_bytes)?;
        let params = init_params::<T>(&field_cfg, cfg.seed);
        let state = TrainState {
            iteration: 0,
            adam_theta: AdamState::new(params.theta.len()),
            adam_phi: AdamState::new(params.phi.len()),
            params,
        };
        Ok(Self {
            field,
            op,
            targets: inputs.iter().flat_map(|i| i.data.iter().copied()).collect(),
            norm: cfg.loss_norm.denominator(&geoms),
            cfg,
            exec,
            reference: None,
            state,
        })
    }

    /// Ground truth for the periodic metric snapshots.
    pub fn with_reference(mut self, mask: BinaryVolume) -> Result<Self> {
        if mask.spec.dims != self.field.grid().dims {
            return Err(Error::shape(format!(
                "reference dims {:?} vs grid {:?}",
                mask.spec.dims,
                self.field.grid().dims
            )));
        }
        self.reference = Some(Reference::new(mask));
        Ok(self)
    }

    pub fn field(&self) -> &NeuralField {
        &self.field
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn params(&self) -> &FieldParams<T> {
        &self.state.params
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Replace the optimizer state, e.g. from a snapshot.
    pub fn restore(&mut self, state: TrainState<T>) -> Result<()> {
        let want = FieldParams::<T>::zeros(self.field.config());
        if state.params.theta.len() != want.theta.len()
            || state.params.phi.len() != want.phi.len()
            || state.adam_theta.m.len() != want.theta.len()
            || state.adam_phi.m.len() != want.phi.len()
        {
            return Err(Error::shape("snapshot does not match the field configuration".to_string()));
        }
        self.state = state;
        Ok(())
    }

    pub fn loss_of(&self, params: &FieldParams<T>) -> Result<f64> {
        let vol = self.field.render(params, &self.exec)?;
        let p = self.op.forward(&vol, &self.exec)?;
        Ok(self.loss_from(&p))
    }

    fn loss_from(&self, p: &[T]) -> f64 {
        let s: f64 = p
            .iter()
            .zip(&self.targets)
            .map(|(a, b)| {
                let d = a.widen() - b.widen();
                d * d
            })
            .sum();
        s / self.norm
    }

    /// Loss and exact gradient with respect to `Theta` and `Phi`.
    pub fn evaluate(&self, params: &FieldParams<T>) -> Result<Evaluation<T>> {
        let volume = self.field.render(params, &self.exec)?;
        let p = self.op.forward(&volume, &self.exec)?;
        let loss = self.loss_from(&p);
        let scale = 2.0 / self.norm;
        let residual: Vec<T> = p.iter().zip(&self.targets).map(|(a, b)| T::cast(scale * (a.widen() - b.widen()))).collect();
        let dmu = self.op.adjoint(&residual, &self.exec)?;
        let grad = self.field.backward_volume(params, &dmu, &self.exec);
        Ok(Evaluation { loss, grad, volume })
    }

    /// One iteration. On a non-finite loss or gradient the parameters are
    /// left untouched and an error is returned.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let ev = self.evaluate(&self.state.params)?;
        if !ev.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at iteration {}", ev.loss, self.state.iteration + 1)));
        }
        let s = &mut self.state;
        adam_step(
            &mut [&mut s.params.theta, &mut s.params.phi],
            &[&ev.grad.theta, &ev.grad.phi],
            &mut [&mut s.adam_theta, &mut s.adam_phi],
            &self.cfg.adam(),
        )?;
        s.iteration += 1;
        let metrics = match &self.reference {
            Some(r) if s.iteration.is_multiple_of(self.cfg.log_every) => Some(evaluate(&ev.volume, r, self.cfg.metric_threshold)?),
            _ => None,
        };
        Ok(TrainRecord { iteration: s.iteration, loss: ev.loss, metrics })
    }

    pub fn render(&self) -> Result<VolumeGrid<T>> {
        self.field.render(&self.state.params, &self.exec)
    }
}

/// Result of [`train`]. `failure` is set when optimization stopped early;
/// `params` are then the last finite ones.
#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub params: FieldParams<T>,
    pub records: Vec<TrainRecord>,
    pub volume: VolumeGrid<T>,
    pub failure: Option<String>,
}

/// Run `cfg.iterations` steps from a seeded initialization.
pub fn train<T: Real>(
    inputs: &[ProjectionImage<T>],
    grid: GridSpec,
    field_cfg: FieldConfig,
    projector: &ProjectorConfig,
    cfg: TrainConfig,
    exec: ExecConfig,
    ground_truth: Option<&BinaryVolume>,
) -> Result<TrainOutput<T>> {
    let iterations = cfg.iterations;
    let mut rec = Reconstructor::new(field_cfg, grid, inputs, projector, cfg, exec)?;
    if let Some(g) = ground_truth {
        rec = rec.with_reference(g.clone())?;
    }
    let mut records = Vec::with_capacity(iterations);
    let mut failure = None;
    for _ in 0..iterations {
        match rec.step() {
            Ok(r) => records.push(r),
            Err(e @ Error::NonFinite(_)) => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutput { volume: rec.render()?, params: rec.state.params, records, failure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncoderConfig;
    use crate::hash_encoding::HashEncoderConfig;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(vals: &[f64], det: usize) -> ProjectionImage<f64> {
        let g = ProjectionGeometry {
            dsd: 1100.0,
            dso: 750.0,
            primary_deg: 0.0,
            secondary_deg: 0.0,
            det_u: det,
            det_v: vals.len() / det,
            du: 1.0,
            dv: 1.0,
        };
        ProjectionImage { view_id: 0, geometry: g, data: vals.to_vec() }
    }

    #[test]
    fn mse_cases() {
        let g = img(&[0.0; 4], 2);
        let p = img(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(mse_loss(&[p.clone()], &[g.clone()]).unwrap(), 7.5);
        assert_eq!(mse_loss(&[p.clone()], &[p.clone()]).unwrap(), 0.0);
        let c = img(&[0.5; 4], 2);
        assert_eq!(mse_loss(&[c], &[g.clone()]).unwrap(), 0.25);
        assert_eq!(mse_loss_with(&[p.clone()], &[g.clone()], LossNorm::PixelsPerView(512)).unwrap(), 30.0 / 512.0);
        assert!(mse_loss(&[p], &[img(&[0.0; 6], 2)]).is_err());
    }

    #[test]
    fn binarize_rules() {
        let grid = GridSpec::new([3, 1, 1], [1.0; 3]).unwrap();
        let v = VolumeGrid::new(grid, vec![0.4f32, 0.6, 0.5]).unwrap();
        assert_eq!(binarize(&v, 0.5).unwrap().data, vec![0, 1, 1]);
        assert!(binarize(&v, 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = VolumeGrid::<f32>::zeros(GridSpec::cubic(6, 1.0).unwrap());
        w.data.iter_mut().for_each(|x| *x = rng.random());
        let (a, b, c) = (binarize(&w, 0.4).unwrap(), binarize(&w, 0.5).unwrap(), binarize(&w, 0.6).unwrap());
        for i in 0..w.data.len() {
            assert!(a.data[i] >= b.data[i] && b.data[i] >= c.data[i]);
        }
    }

    fn views(det: usize, du: f64) -> Vec<ProjectionGeometry> {
        [0.0, 90.0]
            .iter()
            .map(|&a| ProjectionGeometry {
                dsd: 1100.0,
                dso: 750.0,
                primary_deg: a,
                secondary_deg: 0.0,
                det_u: det,
                det_v: det,
                du,
                dv: du,
            })
            .collect()
    }

    fn tiny_field() -> FieldConfig {
        let enc = EncoderConfig::Hash(HashEncoderConfig {
            levels: 2,
            log2_table_size: 6,
            features: 2,
            base_resolution: 2,
            growth: 2.0,
            input_dim: 3,
        });
        FieldConfig::new(enc, 3, 8)
    }

    fn setup(cached: bool) -> Reconstructor<f64> {
        let grid = GridSpec::cubic(8, 1.0).unwrap();
        let geoms = views(8, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let inputs = forward_project(&vol, &geoms, &Default::default(), &Default::default()).unwrap();
        let cfg = TrainConfig { operator_budget_bytes: if cached { usize::MAX } else { 0 }, ..Default::default() };
        Reconstructor::new(tiny_field(), grid, &inputs, &Default::default(), cfg, ExecConfig { chunk_points: 100, ..Default::default() }).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for cached in [true, false] {
            let rec = setup(cached);
            assert_eq!(rec.operator().is_cached(), cached);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut p = rec.params().clone();
            p.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
            let ev = rec.evaluate(&p).unwrap();
            let n_theta = p.theta.len();
            for _ in 0..20 {
                let i = rng.random_range(0..n_theta + p.phi.len());
                let an = if i < n_theta { ev.grad.theta[i] } else { ev.grad.phi[i - n_theta] };
                let at = |d: f64| {
                    let mut q = p.clone();
                    if i < n_theta {
                        q.theta[i] += d;
                    } else {
                        q.phi[i - n_theta] += d;
                    }
                    rec.loss_of(&q).unwrap()
                };
                let shifted = |d: f64| {
                    let mut q = p.clone();
                    if i < n_theta {
                        q.theta[i] += d;
                    } else {
                        q.phi[i - n_theta] += d;
                    }
                    rec.field().activation_pattern(&q, &ExecConfig::default())
                };
                // Fourth-order central stencil on a step small enough that no
                // activation kink lies inside it.
                let base = rec.field().activation_pattern(&p, &ExecConfig::default());
                let mut h = 1e-3;
                while [-2.0, -1.0, 1.0, 2.0].iter().any(|k| shifted(k * h) != base) {
                    h /= 4.0;
                }
                let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-9);
                assert!(err < 1e-6, "param {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn volume_gradient_is_scaled_backprojection() {
        let grid = GridSpec::cubic(8, 1.0).unwrap();
        let geoms = views(8, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let cfg = ProjectorConfig::default();
        let exec = ExecConfig::default();
        let g = forward_project(&vol, &geoms, &cfg, &exec).unwrap();
        let mut x = vol.clone();
        x.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        let p = forward_project(&x, &geoms, &cfg, &exec).unwrap();
        let norm = LossNorm::PixelCount.denominator(&geoms);
        let resid: Vec<ProjectionImage<f64>> = p
            .iter()
            .zip(&g)
            .map(|(a, b)| ProjectionImage {
                data: a.data.iter().zip(&b.data).map(|(u, v)| 2.0 * (u - v) / norm).collect(),
                ..a.clone()
            })
            .collect();
        let grad = backproject(&resid, &grid, &cfg, &exec).unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let o = rng.random_range(0..grid.len());
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data[o] += h;
            b.data[o] -= h;
            let la = mse_loss(&forward_project(&a, &geoms, &cfg, &exec).unwrap(), &g).unwrap();
            let lb = mse_loss(&forward_project(&b, &geoms, &cfg, &exec).unwrap(), &g).unwrap();
            let fd = (la - lb) / (2.0 * h);
            assert!((fd - grad.data[o]).abs() <= 1e-7 * fd.abs().max(1e-6), "{fd} vs {}", grad.data[o]);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let rec = setup(true);
        let init = rec.params().clone();
        let grid = GridSpec::cubic(8, 1.0).unwrap();
        let inputs: Vec<ProjectionImage<f64>> = views(8, 1.5).into_iter().enumerate().map(|(i, g)| ProjectionImage::zeros(i, g)).collect();
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let out = train(&inputs, grid, tiny_field(), &Default::default(), cfg, Default::default(), None).unwrap();
        assert_eq!(out.params, init);
        assert!(out.records.is_empty());
    }

    #[test]
    fn view_order_does_not_change_loss() {
        let grid = GridSpec::cubic(8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vol = VolumeGrid::<f64>::zeros(grid);
        vol.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let mut inputs = forward_project(&vol, &views(8, 1.5), &Default::default(), &Default::default()).unwrap();
        let a = Reconstructor::new(tiny_field(), grid, &inputs, &Default::default(), TrainConfig::default(), Default::default()).unwrap();
        inputs.reverse();
        let b = Reconstructor::new(tiny_field(), grid, &inputs, &Default::default(), TrainConfig::default(), Default::default()).unwrap();
        let (la, lb) = (a.loss_of(a.params()).unwrap(), b.loss_of(b.params()).unwrap());
        assert!((la - lb).abs() <= 1e-12 * la);
    }

    #[test]
    fn desk_run_halves_the_loss_and_is_deterministic() {
        let grid = GridSpec::cubic(8, 1.0).unwrap();
        let spec = PhantomSpec { radius_root_mm: 1.5, radius_taper: 1.0, n_branches: 1, ..PhantomSpec::new(grid, 0) };
        let truth = generate_phantom(&spec).unwrap();
        let geoms = views(16, 0.75);
        let inputs = forward_project(&truth.to_real::<f32>(), &geoms, &Default::default(), &Default::default()).unwrap();
        let enc = EncoderConfig::Hash(HashEncoderConfig { levels: 4, log2_table_size: 10, base_resolution: 4, ..Default::default() });
        let field = FieldConfig::new(enc, 3, 16);
        let cfg = TrainConfig { iterations: 500, lr: 1e-2, log_every: 100, ..Default::default() };
        let run = || train(&inputs, grid, field, &Default::default(), cfg.clone(), Default::default(), Some(&truth)).unwrap();
        let out = run();
        let (first, last) = (out.records[0].loss, out.records.last().unwrap().loss);
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert_eq!(out.records.iter().filter(|r| r.metrics.is_some()).count(), 5);
        let again = run();
        let bits = |o: &TrainOutput<f32>| o.records.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&again));
        assert_eq!(out.volume, again.volume);
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let mut a = setup(true);
        let mut b = setup(true);
        for _ in 0..3 {
            a.step().unwrap();
            b.step().unwrap();
        }
        let snap = a.state().clone();
        let mut c = setup(true);
        c.restore(snap).unwrap();
        let rb = b.step().unwrap();
        let rc = c.step().unwrap();
        assert_eq!(rb.loss.to_bits(), rc.loss.to_bits());
        assert_eq!(b.params(), c.params());
    }
}
