//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) these run on the rayon pool;
//! without it they are plain iterators. Results always come back in index
//! order, so reductions over them are bit-identical either way.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Fallible [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

pub fn try_map_slice<S, T, F>(items: &[S], f: F) -> Result<Vec<T>>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> Result<T> + Sync + Send,
{
    try_map_indexed(items.len(), |i| f(&items[i]))
}

/// Caps the global worker count. Returns false if the pool was already
/// initialized or the crate is built without the `parallel` feature.
pub fn set_worker_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
