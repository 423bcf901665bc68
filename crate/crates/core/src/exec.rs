//! Execution helpers shared by the per-point and per-ray kernels.
//!
//! Everything here degrades to plain sequential loops without the `parallel`
//! feature. Deterministic reductions split work into a fixed task list that
//! does not depend on the worker count and merge partial results in task
//! order; fast reductions let the scheduler decide the merge tree.

use alloc::vec::Vec;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How partial sums from concurrent workers are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Fixed task partition, merged in task order. Bitwise reproducible.
    #[default]
    Deterministic,
    /// Scheduler-dependent merge order; reproducible only to rounding.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    /// Points evaluated per batch; bounds peak memory of field evaluation.
    pub chunk_points: usize,
    pub reduction: Reduction,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self { chunk_points: 4096, reduction: Reduction::Deterministic }
    }
}

/// Number of deterministic tasks merged per wave.
pub(crate) const WAVE: usize = 16;

pub(crate) fn map_tasks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map `n` tasks and merge their results into `acc`.
///
/// In [`Reduction::Deterministic`] mode tasks run in waves of [`WAVE`] and are
/// merged strictly in task order. In [`Reduction::Fast`] mode each worker folds
/// into its own partial accumulator (created by `fresh`) and the partials are
/// combined in scheduler order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reduce_tasks<A, R, M, G, C, N>(
    n: usize,
    mode: Reduction,
    acc: &mut A,
    map: M,
    merge: G,
    combine: C,
    fresh: N,
) where
    A: Send,
    R: Send,
    M: Fn(usize) -> R + Sync + Send,
    G: Fn(&mut A, R) + Sync + Send,
    C: Fn(&mut A, A) + Sync + Send,
    N: Fn() -> A + Sync + Send,
{
    match mode {
        Reduction::Deterministic => {
            let _ = (&combine, &fresh);
            let mut start = 0;
            while start < n {
                let end = (start + WAVE).min(n);
                let parts = map_tasks(end - start, |i| map(start + i));
                for p in parts {
                    merge(acc, p);
                }
                start = end;
            }
        }
        Reduction::Fast => {
            #[cfg(feature = "parallel")]
            {
                let partials: Vec<A> = (0..n)
                    .into_par_iter()
                    .fold(&fresh, |mut a, i| {
                        merge(&mut a, map(i));
                        a
                    })
                    .collect();
                for p in partials {
                    combine(acc, p);
                }
            }
            #[cfg(not(feature = "parallel"))]
            {
                let _ = (&combine, &fresh);
                for i in 0..n {
                    merge(acc, map(i));
                }
            }
        }
    }
}
