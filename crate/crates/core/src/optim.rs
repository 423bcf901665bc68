//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("must be finite and > 0, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam_eps", format!("must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }
}

/// One Adam update over several parameter groups sharing a step counter.
///
/// Gradients are checked before anything is touched: a non-finite gradient
/// leaves parameters and state unchanged.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut [&mut AdamState<T>],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::shape(format!(
            "{} parameter groups, {} gradient groups, {} state groups",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (gi, ((p, g), s)) in params.iter().zip(grads).zip(state.iter()).enumerate() {
        if p.len() != g.len() || p.len() != s.m.len() || p.len() != s.v.len() {
            return Err(Error::shape(format!(
                "group {gi}: {} parameters, {} gradients, {} moments",
                p.len(),
                g.len(),
                s.m.len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient group {gi} entry {i} is {}", g[i])));
        }
    }
    let t = state.first().map_or(0, |s| s.t) + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
    let step = T::cast(cfg.lr / c1);
    let inv_c2 = T::cast(1.0 / c2);
    let (tb1, tb2) = (T::cast(b1), T::cast(b2));
    let (ob1, ob2) = (T::cast(1.0 - b1), T::cast(1.0 - b2));
    let eps = T::cast(cfg.eps);
    for ((p, g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        for i in 0..p.len() {
            let gi = g[i];
            let m = tb1 * s.m[i] + ob1 * gi;
            let v = tb2 * s.v[i] + ob2 * gi * gi;
            s.m[i] = m;
            s.v[i] = v;
            p[i] -= step * m / ((v * inv_c2).sqrt() + eps);
        }
        s.t = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3f64, -0.2];
        let mut s = AdamState::new(2);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut [&mut s], &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -0.2]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
        for g in [2.5f64, -0.01, 1e3] {
            let mut p = vec![1.0f64];
            let mut s = AdamState::new(1);
            adam_step(&mut [&mut p], &[&[g]], &mut [&mut s], &cfg).unwrap();
            let expect = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
        }
    }

    #[test]
    fn reference_second_step() {
        // Hand-evaluated: g1 = 1, g2 = -2, lr = 0.1.
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut [&mut p], &[&[1.0]], &mut [&mut s], &cfg).unwrap();
        adam_step(&mut [&mut p], &[&[-2.0]], &mut [&mut s], &cfg).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64 * 0.999);
        let expect = -0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-14);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let mut p = vec![1.0f32, 2.0];
        let mut s = AdamState::new(2);
        let err = adam_step(&mut [&mut p], &[&[0.0, f32::NAN]], &mut [&mut s], &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.t, 0);
        assert!(adam_step(&mut [&mut p], &[&[0.0]], &mut [&mut s], &AdamConfig::default()).is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
