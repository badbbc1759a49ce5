//! Deterministic execution helpers.
//!
//! Work is split into fixed-size chunks whose results are combined in chunk
//! order, so the parallel (rayon) and sequential builds produce bit-identical
//! results and runs are reproducible across thread counts.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const DEFAULT_CHUNK: usize = 4096;

/// Map fixed chunks of `0..len`, collecting per-chunk results in order.
pub fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    #[cfg(feature = "parallel")]
    {
        (0..n_chunks)
            .into_par_iter()
            .map(|c| f(c * chunk..((c + 1) * chunk).min(len)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chunks)
            .map(|c| f(c * chunk..((c + 1) * chunk).min(len)))
            .collect()
    }
}

/// Chunked sum with a fixed reduction order.
pub fn sum_chunks<F>(len: usize, chunk: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync,
{
    map_chunks(len, chunk, f).into_iter().sum()
}

/// Run `f` on disjoint mutable slabs of `data` (slab index, slab).
pub fn for_each_slab_mut<T, F>(data: &mut [T], slab: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let slab = slab.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(slab).enumerate().for_each(|(i, s)| f(i, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(slab).enumerate().for_each(|(i, s)| f(i, s));
    }
}

/// Slab iteration over two equally sized buffers (e.g. values + weights).
pub fn for_each_slab_pair_mut<A, B, F>(a: &mut [A], b: &mut [B], slab: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    assert_eq!(a.len(), b.len());
    let slab = slab.max(1);
    #[cfg(feature = "parallel")]
    {
        a.par_chunks_mut(slab)
            .zip(b.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(i, (sa, sb))| f(i, sa, sb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(slab)
            .zip(b.chunks_mut(slab))
            .enumerate()
            .for_each(|(i, (sa, sb))| f(i, sa, sb));
    }
}
