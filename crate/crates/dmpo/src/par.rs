//! Data-parallel shim.
//!
//! With the `parallel` feature (default) the mappers run on rayon; without it
//! they run on plain iterators. Both paths produce results in input order and
//! all reductions downstream fold sequentially over the collected vectors, so
//! outputs are bit-identical across feature settings and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Map over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential reference path, always available; the benches compare this
/// against `map_range` on the same workload.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Install a global thread pool with `n` workers (0 = library default).
/// No-op without the `parallel` feature. Results never depend on `n`.
#[cfg(feature = "parallel")]
pub fn init_thread_pool(n: usize) -> crate::Result<()> {
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn init_thread_pool(_n: usize) -> crate::Result<()> {
    Ok(())
}
