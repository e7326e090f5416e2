//! Data-parallel loop helpers.
//!
//! Kernels parallelize only across disjoint output chunks; every individual
//! accumulation runs in a fixed sequential order inside one chunk. That keeps
//! results bitwise identical whether the `parallel` feature (rayon) is on or
//! the sequential fallback is compiled in, and independent of thread count.

/// Applies `f` to equally sized disjoint chunks of `data`, passing the chunk
/// index. Chunked over rayon when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Always-sequential twin of [`for_each_chunk_mut`], used to pin down the
/// chunked helpers in tests.
#[cfg(test)]
pub(crate) fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// `out[i] += a * x[i]` over a contiguous pair of slices.
#[inline]
pub(crate) fn axpy<T: crate::tensor::Element>(a: T, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + a * v;
    }
}
