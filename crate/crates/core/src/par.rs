//! Thin switch between rayon and plain iterators.
//!
//! With the `parallel` feature off every helper runs sequentially. Work is
//! always split into the same fixed-size chunks and partial results are
//! combined in chunk order, so both builds produce bit-identical numbers.

/// Neuron rows per work item in the training kernels.
pub const CHUNK: usize = 256;

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of
/// `data` and returns the per-chunk results in order.
#[cfg(feature = "parallel")]
pub fn map_chunks_mut<T, R, F>(data: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk.max(1))
        .enumerate()
        .map(|(k, c)| f(k, c))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_chunks_mut<T, R, F>(data: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    data.chunks_mut(chunk.max(1))
        .enumerate()
        .map(|(k, c)| f(k, c))
        .collect()
}

/// Same as [`map_chunks_mut`] over two slices cut in lockstep, `chunk_a`
/// elements of `a` alongside `chunk_b` elements of `b`.
#[cfg(feature = "parallel")]
pub fn map_chunks2_mut<A, B, R, F>(a: &mut [A], chunk_a: usize, b: &mut [B], chunk_b: usize, f: F) -> Vec<R>
where
    A: Send,
    B: Send,
    R: Send,
    F: Fn(usize, &mut [A], &mut [B]) -> R + Sync + Send,
{
    use rayon::prelude::*;
    a.par_chunks_mut(chunk_a.max(1))
        .zip(b.par_chunks_mut(chunk_b.max(1)))
        .enumerate()
        .map(|(k, (x, y))| f(k, x, y))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_chunks2_mut<A, B, R, F>(a: &mut [A], chunk_a: usize, b: &mut [B], chunk_b: usize, f: F) -> Vec<R>
where
    A: Send,
    B: Send,
    R: Send,
    F: Fn(usize, &mut [A], &mut [B]) -> R + Sync + Send,
{
    a.chunks_mut(chunk_a.max(1))
        .zip(b.chunks_mut(chunk_b.max(1)))
        .enumerate()
        .map(|(k, (x, y))| f(k, x, y))
        .collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
