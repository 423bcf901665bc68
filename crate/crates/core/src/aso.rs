//! Almost Stochastic Order test on two score samples.
//!
//! The violation ratio of "A is stochastically larger than B" is the share
//! of the squared quantile-function distance where `F_A^-1 < F_B^-1`. It is
//! integrated exactly over the step quantile functions of the samples. The
//! reported `epsilon_min` is an upper `1 - alpha` confidence bound from a
//! seeded bootstrap of both samples.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsoConfig {
    pub alpha: f64,
    pub n_bootstrap: usize,
    /// Decision threshold: A dominates when `epsilon_min < tau`.
    pub tau: f64,
    pub seed: u64,
}

impl Default for AsoConfig {
    fn default() -> Self {
        Self { alpha: 0.05, n_bootstrap: 1000, tau: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsoResult {
    pub epsilon_min: f64,
    /// Violation ratio of the observed samples.
    pub epsilon: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Bootstrap resamples that entered the variance estimate.
    pub n_bootstrap: usize,
    pub dominant: bool,
}

/// Violation ratio for sorted samples; `None` when the quantile functions
/// coincide everywhere.
pub fn violation_ratio_sorted(a: &[f64], b: &[f64]) -> Option<f64> {
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let (mut viol, mut total) = (0.0f64, 0.0f64);
    // Breakpoints i/n and j/m are compared as integers over the common
    // denominator n*m.
    while i < a.len() && j < b.len() {
        let ea = (i as u128 + 1) * m;
        let eb = (j as u128 + 1) * n;
        let end = ea.min(eb);
        let w = (end - prev) as f64 / (n * m) as f64;
        let d = a[i] - b[j];
        let c = w * d * d;
        total += c;
        if d < 0.0 {
            viol += c;
        }
        prev = end;
        if ea == end {
            i += 1;
        }
        if eb == end {
            j += 1;
        }
    }
    (total > 0.0).then(|| viol / total)
}

/// Violation ratio of "A stochastically dominates B" for unsorted samples.
pub fn violation_ratio(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    violation_ratio_sorted(&a, &b)
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let lo = 0.02425;
    if p < lo {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lo {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Test whether `a` almost stochastically dominates `b` (higher is better).
/// Returns `None` when all scores in both samples are identical.
pub fn aso_test(a: &[f64], b: &[f64], cfg: &AsoConfig) -> Result<Option<AsoResult>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("scores", "both samples must be nonempty"));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {v} is not finite")));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {}", cfg.alpha)));
    }
    if cfg.n_bootstrap == 0 {
        return Err(Error::invalid("n_bootstrap", "must be >= 1"));
    }
    let Some(eps) = violation_ratio(a, b) else {
        return Ok(None);
    };
    let (n, m) = (a.len(), b.len());
    let c = ((n * m) as f64 / (n + m) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ra = Vec::with_capacity(n);
    let mut rb = Vec::with_capacity(m);
    let mut dev = Vec::with_capacity(cfg.n_bootstrap);
    for _ in 0..cfg.n_bootstrap {
        ra.clear();
        rb.clear();
        ra.extend((0..n).map(|_| a[rng.random_range(0..n)]));
        rb.extend((0..m).map(|_| b[rng.random_range(0..m)]));
        ra.sort_by(f64::total_cmp);
        rb.sort_by(f64::total_cmp);
        if let Some(e) = violation_ratio_sorted(&ra, &rb) {
            dev.push(c * (e - eps));
        }
    }
    let sigma = if dev.is_empty() {
        0.0
    } else {
        let mean = dev.iter().sum::<f64>() / dev.len() as f64;
        (dev.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dev.len() as f64).sqrt()
    };
    let epsilon_min = (eps + normal_quantile(1.0 - cfg.alpha) * sigma / c).clamp(0.0, 1.0);
    Ok(Some(AsoResult {
        epsilon_min,
        epsilon: eps,
        alpha: cfg.alpha,
        tau: cfg.tau,
        n_bootstrap: dev.len(),
        dominant: epsilon_min < cfg.tau,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn quantile_matches_reference() {
        let n = Normal::standard();
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            assert!((normal_quantile(p) - n.inverse_cdf(p)).abs() < 1e-8, "p = {p}");
        }
        for p in [1e-10, 1e-5, 1.0 - 1e-6] {
            assert!((normal_quantile(p) - n.inverse_cdf(p)).abs() < 1e-6 * n.inverse_cdf(p).abs());
        }
    }

    /// Numerical integration oracle over a fine grid of quantile levels.
    fn ratio_by_quadrature(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let q = |s: &[f64], t: f64| s[((t * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        let k = 200_000;
        let (mut v, mut tot) = (0.0, 0.0);
        for i in 0..k {
            let t = (i as f64 + 0.5) / k as f64;
            let d = q(&a, t) - q(&b, t);
            tot += d * d;
            if d < 0.0 {
                v += d * d;
            }
        }
        v / tot
    }

    #[test]
    fn exact_integral_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let n = rng.random_range(3..40);
            let m = rng.random_range(3..40);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exact = violation_ratio(&a, &b).unwrap();
            assert!((exact - ratio_by_quadrature(&a, &b)).abs() < 1e-3);
        }
        assert_eq!(violation_ratio(&[1.0, 2.0], &[0.0, 1.0]), Some(0.0));
        assert_eq!(violation_ratio(&[0.0, 1.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(violation_ratio(&[3.0], &[3.0, 3.0]), None);
    }

    #[test]
    fn shifted_sample_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 10.0).collect();
        let r = aso_test(&a, &b, &AsoConfig::default()).unwrap().unwrap();
        assert!(r.epsilon_min < 0.2 && r.dominant);
        let r = aso_test(&b, &a, &AsoConfig::default()).unwrap().unwrap();
        assert!(!r.dominant);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        assert_eq!(aso_test(&[1.0, 1.0], &[1.0], &AsoConfig::default()).unwrap(), None);
        assert!(aso_test(&[], &[1.0], &AsoConfig::default()).is_err());
        assert!(aso_test(&[1.0], &[2.0], &AsoConfig { alpha: 1.0, ..Default::default() }).is_err());
        assert!(aso_test(&[f64::NAN], &[2.0], &AsoConfig::default()).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = [0.3, 0.5, 0.2, 0.9, 0.4];
        let b = [0.1, 0.6, 0.35, 0.2];
        let cfg = AsoConfig { n_bootstrap: 200, ..Default::default() };
        assert_eq!(aso_test(&a, &b, &cfg).unwrap(), aso_test(&a, &b, &cfg).unwrap());
    }
}
