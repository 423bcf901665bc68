//! Two-view cone-beam reconstruction of vessel trees with an implicit neural
//! occupancy field.
//!
//! The crate is `no_std` + `alloc` at its core. The `std` feature switches the
//! math backend to the platform libm and enables runtime SIMD dispatch in the
//! matrix kernels; `parallel` (on by default) spreads per-point and per-ray
//! work over a rayon pool.
//!
//! Pipeline, in module order:
//!
//! - [`geometry`]: voxel grids, coordinate normalization, C-arm poses and rays.
//! - [`hash_encoding`] / [`frequency`]: coordinate encoders.
//! - [`mlp`] / [`field`]: the residual occupancy MLP and the composed field.
//! - [`projector`]: matched cone-beam forward projection and backprojection.
//! - [`optim`] / [`trainer`]: Adam and the self-supervised optimization loop.
//! - [`metrics`] / [`aso`]: evaluation metrics and the almost-stochastic-order test.
//! - [`phantom`]: synthetic vessel-tree phantoms.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aso;
pub mod error;
pub mod field;
pub mod frequency;
pub mod geometry;
pub mod hash_encoding;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod phantom;
pub mod projector;
pub mod real;
pub mod trainer;

mod exec;

pub use error::{Error, Result};
pub use exec::{ExecConfig, Reduction};
pub use real::Real;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
