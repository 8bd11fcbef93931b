//! Data-parallel helpers. With the `parallel` feature the row loops run on the
//! rayon pool; without it they run in order on the calling thread. Every
//! output element is reduced by exactly one closure invocation, so results
//! are bitwise identical across thread counts.

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Maps `f` over `0..n` and collects in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Configures the global worker pool. `None` keeps rayon's default.
/// A no-op without the `parallel` feature. Returns false if the pool was
/// already initialised.
pub fn init_threads(threads: Option<usize>) -> bool {
    #[cfg(feature = "parallel")]
    {
        match threads {
            Some(n) if n > 0 => rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok(),
            _ => true,
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}

/// Thread cap requested through `RADFORMER_THREADS`, if set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("RADFORMER_THREADS").ok()?.trim().parse().ok()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
