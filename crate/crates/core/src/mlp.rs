//! Residual occupancy MLP with hand-written batched forward/backward passes.
//!
//! `n_layers` affine maps; every layer but the last is followed by a
//! LeakyReLU, the last by a sigmoid. The raw input features re-enter the
//! network at the skip layer (default `n_layers / 2`), either concatenated
//! onto the incoming activations or added onto their first `in_dim`
//! channels.
//!
//! Parameters are one flat buffer: for each layer, the `out x in` row-major
//! weight matrix followed by the `out` biases.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipMode {
    /// `[activations | features]` feeds the skip layer.
    #[default]
    Concat,
    /// Features are added onto the first `in_dim` activation channels.
    Add,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub n_layers: usize,
    pub hidden_width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Negative-region slope of the LeakyReLU.
    pub leaky_slope: f64,
    pub skip: SkipMode,
    /// Layer (0-based) whose input receives the raw features.
    /// Defaults to `n_layers / 2`.
    pub skip_layer: Option<usize>,
}

impl MlpConfig {
    /// Eight layers, 256 wide, concatenating skip into layer index 4.
    pub fn with_input(in_dim: usize) -> Self {
        Self {
            n_layers: 8,
            hidden_width: 256,
            in_dim,
            out_dim: 1,
            leaky_slope: 0.01,
            skip: SkipMode::Concat,
            skip_layer: None,
        }
    }

    pub fn skip_target(&self) -> Option<usize> {
        match self.skip {
            SkipMode::None => None,
            _ => Some(self.skip_layer.unwrap_or(self.n_layers / 2)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::invalid("n_layers", format!("must be >= 2, got {}", self.n_layers)));
        }
        if self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width", "must be >= 1"));
        }
        if self.in_dim == 0 {
            return Err(Error::invalid("in_dim", "must be >= 1"));
        }
        if self.out_dim != 1 {
            return Err(Error::invalid("out_dim", format!("must be 1, got {}", self.out_dim)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::invalid("leaky_slope", format!("must be in [0, 1), got {}", self.leaky_slope)));
        }
        if let Some(t) = self.skip_target() {
            if t == 0 || t >= self.n_layers {
                return Err(Error::invalid(
                    "skip_layer",
                    format!("must be in 1..{}, got {t}", self.n_layers),
                ));
            }
            if self.skip == SkipMode::Add && self.in_dim > self.hidden_width {
                return Err(Error::invalid(
                    "skip",
                    format!(
                        "additive skip needs in_dim ({}) <= hidden_width ({})",
                        self.in_dim, self.hidden_width
                    ),
                ));
            }
        }
        Ok(())
    }

    /// `(out, in)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let skip = self.skip_target();
        (0..self.n_layers)
            .map(|l| {
                let out = if l + 1 == self.n_layers { self.out_dim } else { self.hidden_width };
                let mut inp = if l == 0 { self.in_dim } else { self.hidden_width };
                if skip == Some(l) && self.skip == SkipMode::Concat {
                    inp += self.in_dim;
                }
                (out, inp)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Trainable MLP weights `Phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub shapes: Vec<(usize, usize)>,
    pub data: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn zeros(cfg: &MlpConfig) -> Self {
        Self { shapes: cfg.layer_shapes(), data: vec![T::zero(); cfg.param_count()] }
    }

    /// Kaiming-uniform weights for a LeakyReLU network, zero biases.
    pub fn kaiming<R: Rng + ?Sized>(cfg: &MlpConfig, rng: &mut R) -> Self {
        let shapes = cfg.layer_shapes();
        let gain = (2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();
        let mut data = Vec::with_capacity(cfg.param_count());
        for &(out, inp) in &shapes {
            let bound = gain * (3.0 / inp as f64).sqrt();
            data.extend((0..out * inp).map(|_| T::cast(rng.random_range(-bound..=bound))));
            data.extend((0..out).map(|_| T::zero()));
        }
        Self { shapes, data }
    }

    pub fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn weight(&self, layer: usize) -> &[T] {
        let (o, i) = self.shapes[layer];
        let s = self.layer_offset(layer);
        &self.data[s..s + o * i]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [T] {
        let (o, i) = self.shapes[layer];
        let s = self.layer_offset(layer);
        &mut self.data[s..s + o * i]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let (o, i) = self.shapes[layer];
        let s = self.layer_offset(layer) + o * i;
        &self.data[s..s + o]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let (o, i) = self.shapes[layer];
        let s = self.layer_offset(layer) + o * i;
        &mut self.data[s..s + o]
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape<T> {
    pub batch: usize,
    /// Input matrix of each layer, `batch x in_l`.
    pub inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer, `batch x out_l`.
    pub pre: Vec<Vec<T>>,
    /// Sigmoid output, `batch`.
    pub output: Vec<T>,
}

#[inline]
pub fn leaky_relu<T: Real>(z: T, slope: T) -> T {
    if z > T::zero() {
        z
    } else {
        z * slope
    }
}

#[inline]
fn leaky_grad<T: Real>(z: T, slope: T) -> T {
    if z > T::zero() {
        T::one()
    } else {
        slope
    }
}

/// Logistic sigmoid kept strictly inside `(0, 1)` at the working precision.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    let s = T::one() / (T::one() + (-z).exp());
    let hi = T::one() - T::epsilon() / T::cast(2.0);
    s.max(T::min_positive_value()).min(hi)
}

/// Validated network shape with precomputed layer offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    skip: Option<usize>,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for (o, i) in &shapes {
            offsets.push(acc);
            acc += o * i + o;
        }
        Ok(Self { skip: config.skip_target(), config, shapes, offsets })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "MLP parameter buffer has {} values, configuration needs {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Forward pass over `batch` rows of `x` (`batch x in_dim`), writing the
    /// occupancy of each row into `out`. Records a tape when one is given.
    pub fn forward_batch<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        batch: usize,
        out: &mut [T],
        mut tape: Option<&mut MlpTape<T>>,
    ) {
        let cfg = &self.config;
        let slope = T::cast(cfg.leaky_slope);
        let n = self.shapes.len();
        debug_assert_eq!(x.len(), batch * cfg.in_dim);
        if let Some(t) = tape.as_deref_mut() {
            t.batch = batch;
            t.inputs.clear();
            t.pre.clear();
        }
        let mut act: Vec<T> = Vec::new();
        for l in 0..n {
            let (o, i) = self.shapes[l];
            let input: Vec<T> = if l == 0 {
                x.to_vec()
            } else if self.skip == Some(l) {
                let h = cfg.hidden_width;
                match cfg.skip {
                    SkipMode::Concat => {
                        let mut m = vec![T::zero(); batch * i];
                        for b in 0..batch {
                            m[b * i..b * i + h].copy_from_slice(&act[b * h..(b + 1) * h]);
                            m[b * i + h..(b + 1) * i]
                                .copy_from_slice(&x[b * cfg.in_dim..(b + 1) * cfg.in_dim]);
                        }
                        m
                    }
                    SkipMode::Add => {
                        let mut m = core::mem::take(&mut act);
                        for b in 0..batch {
                            for c in 0..cfg.in_dim {
                                m[b * h + c] += x[b * cfg.in_dim + c];
                            }
                        }
                        m
                    }
                    SkipMode::None => unreachable!(),
                }
            } else {
                core::mem::take(&mut act)
            };
            let w = &params[self.offsets[l]..self.offsets[l] + o * i];
            let bias = &params[self.offsets[l] + o * i..self.offsets[l] + o * i + o];
            let mut z = vec![T::zero(); batch * o];
            for row in z.chunks_exact_mut(o) {
                row.copy_from_slice(bias);
            }
            // z = input * w^T + z
            T::gemm(batch, i, o, T::one(), &input, i, 1, w, 1, i, T::one(), &mut z, o, 1);
            if l + 1 < n {
                act = z.iter().map(|&v| leaky_relu(v, slope)).collect();
            } else {
                for (dst, &v) in out.iter_mut().zip(&z) {
                    *dst = sigmoid(v);
                }
            }
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(input);
                t.pre.push(z);
            }
        }
        if let Some(t) = tape {
            t.output = out[..batch].to_vec();
        }
    }

    /// Reverse pass. Adds `d loss / d params` into `grad` and, when `dx` is
    /// given, writes `d loss / d features` (`batch x in_dim`) into it.
    /// `upstream` holds `d loss / d occupancy` per row.
    pub fn backward_batch<T: Real>(
        &self,
        params: &[T],
        tape: &MlpTape<T>,
        upstream: &[T],
        grad: &mut [T],
        mut dx: Option<&mut [T]>,
    ) {
        let cfg = &self.config;
        let slope = T::cast(cfg.leaky_slope);
        let n = self.shapes.len();
        let batch = tape.batch;
        if let Some(d) = dx.as_deref_mut() {
            d[..batch * cfg.in_dim].fill(T::zero());
        }
        // d loss / d z of the output layer
        let mut dz: Vec<T> = (0..batch)
            .map(|b| {
                let s = tape.output[b];
                upstream[b] * s * (T::one() - s)
            })
            .collect();
        for l in (0..n).rev() {
            let (o, i) = self.shapes[l];
            let off = self.offsets[l];
            let input = &tape.inputs[l];
            {
                let (gw, gb) = grad[off..off + o * i + o].split_at_mut(o * i);
                // gw += dz^T * input
                T::gemm(o, batch, i, T::one(), &dz, 1, o, input, i, 1, T::one(), gw, i, 1);
                for row in dz.chunks_exact(o) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            if l == 0 && dx.is_none() {
                break;
            }
            let w = &params[off..off + o * i];
            let mut di = vec![T::zero(); batch * i];
            T::gemm(batch, o, i, T::one(), &dz, o, 1, w, i, 1, T::zero(), &mut di, i, 1);
            if l == 0 {
                if let Some(d) = dx.as_deref_mut() {
                    for (a, &b) in d.iter_mut().zip(&di) {
                        *a += b;
                    }
                }
                break;
            }
            let h = cfg.hidden_width;
            let mut da: Vec<T> = if self.skip == Some(l) {
                match cfg.skip {
                    SkipMode::Concat => {
                        let mut da = vec![T::zero(); batch * h];
                        for b in 0..batch {
                            da[b * h..(b + 1) * h].copy_from_slice(&di[b * i..b * i + h]);
                            if let Some(d) = dx.as_deref_mut() {
                                for c in 0..cfg.in_dim {
                                    d[b * cfg.in_dim + c] += di[b * i + h + c];
                                }
                            }
                        }
                        da
                    }
                    SkipMode::Add => {
                        if let Some(d) = dx.as_deref_mut() {
                            for b in 0..batch {
                                for c in 0..cfg.in_dim {
                                    d[b * cfg.in_dim + c] += di[b * h + c];
                                }
                            }
                        }
                        di
                    }
                    SkipMode::None => unreachable!(),
                }
            } else {
                di
            };
            for (d, &z) in da.iter_mut().zip(&tape.pre[l - 1]) {
                *d *= leaky_grad(z, slope);
            }
            dz = da;
        }
    }
}

/// Single-point forward pass.
pub fn mlp_forward<T: Real>(cfg: &MlpConfig, params: &MlpParams<T>, features: &[T]) -> Result<(T, MlpTape<T>)> {
    let mlp = Mlp::new(*cfg)?;
    mlp.check_params(&params.data)?;
    if features.len() != cfg.in_dim {
        return Err(Error::shape(format!("expected {} features, got {}", cfg.in_dim, features.len())));
    }
    let mut tape = MlpTape::default();
    let mut out = [T::zero()];
    mlp.forward_batch(&params.data, features, 1, &mut out, Some(&mut tape));
    Ok((out[0], tape))
}

/// Single-point reverse pass: `(d loss / d Phi, d loss / d features)`.
pub fn mlp_backward<T: Real>(
    cfg: &MlpConfig,
    params: &MlpParams<T>,
    tape: &MlpTape<T>,
    upstream: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let mlp = Mlp::new(*cfg)?;
    mlp.check_params(&params.data)?;
    if tape.batch != 1 || tape.pre.len() != cfg.n_layers || tape.inputs[0].len() != cfg.in_dim {
        return Err(Error::shape("tape does not come from a matching single-point forward pass"));
    }
    let mut grad = vec![T::zero(); mlp.param_count()];
    let mut dx = vec![T::zero(); cfg.in_dim];
    mlp.backward_batch(&params.data, tape, &[upstream], &mut grad, Some(&mut dx));
    Ok((grad, dx))
}
