//! Data-parallel execution helpers.
//!
//! Every hot kernel in this crate is written as a map over independent
//! output elements (rows, voxels, points). These helpers run that map with
//! rayon when the `parallel` feature is enabled and with plain iterators
//! otherwise. Because no output element depends on another and each element
//! is computed by the same sequential code, results are bitwise identical
//! in both modes and at any thread count.

/// Inputs smaller than this run sequentially even with `parallel` enabled;
/// rayon dispatch would dominate at gradient-check sizes.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 2048;

/// Map `f` over `0..n`, collecting into a `Vec`.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, cost_per_item: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if n.saturating_mul(cost_per_item) < PAR_THRESHOLD {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, _cost_per_item: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive mutable chunks of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, cost_per_item: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    if data.len().saturating_mul(cost_per_item) < PAR_THRESHOLD {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, _cost_per_item: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sort by a key that is a strict total order (every element distinct).
/// Unstable parallel sort is deterministic under that precondition.
#[cfg(feature = "parallel")]
pub fn sort_by_total_key<T, K, F>(data: &mut Vec<T>, key: F)
where
    T: Send,
    K: Ord + Send,
    F: Fn(&T) -> K + Sync,
{
    use rayon::prelude::*;
    if data.len() < PAR_THRESHOLD {
        data.sort_unstable_by_key(|t| key(t));
    } else {
        data.par_sort_unstable_by_key(|t| key(t));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn sort_by_total_key<T, K, F>(data: &mut Vec<T>, key: F)
where
    K: Ord,
    F: Fn(&T) -> K,
{
    data.sort_unstable_by_key(|t| key(t));
}
