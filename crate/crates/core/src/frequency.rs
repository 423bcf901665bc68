//! Fixed sinusoidal coordinate encoding, used as the non-learnable
//! alternative to the hash encoder.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::{GridSpec, Vec3};
use crate::hash_encoding::unit_cube;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyConfig {
    /// Number of octaves `K`; the encoding has `6K` channels.
    pub frequencies: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self { frequencies: 10 }
    }
}

impl FrequencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies == 0 {
            return Err(Error::invalid("frequencies", "must be >= 1"));
        }
        if self.frequencies > 30 {
            return Err(Error::invalid("frequencies", "must be <= 30"));
        }
        Ok(())
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        6 * self.frequencies
    }

    /// Channels ordered axis-major: for each axis, `(sin, cos)` pairs of
    /// increasing octave.
    pub fn encode_unit<T: Real>(&self, unit: Vec3, out: &mut [T]) {
        let k = self.frequencies;
        for a in 0..3 {
            let mut w = PI;
            for j in 0..k {
                let (s, c) = (w * unit[a]).sin_cos();
                out[a * 2 * k + 2 * j] = T::cast(s);
                out[a * 2 * k + 2 * j + 1] = T::cast(c);
                w *= 2.0;
            }
        }
    }

    pub fn encode<T: Real>(&self, x_norm: Vec3, grid: &GridSpec) -> Result<Vec<T>> {
        self.validate()?;
        let unit = unit_cube(x_norm, grid)?;
        let mut out = vec![T::zero(); self.output_dim()];
        self.encode_unit(unit, &mut out);
        Ok(out)
    }
}
