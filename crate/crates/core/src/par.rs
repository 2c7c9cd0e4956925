//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature every helper dispatches to rayon; without it
//! the same closures run in order on the calling thread. Each output slot is
//! written by exactly one closure invocation, so results are bit-identical
//! between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the parallel path is not worth the fork.
#[cfg(feature = "parallel")]
const MIN_PAR_LEN: usize = 4096;

/// Calls `f(row, row_slice)` for every `width`-sized row of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() >= MIN_PAR_LEN {
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Maps a slice through `f`, preserving order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
