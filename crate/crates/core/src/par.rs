//! Data-parallel helpers. With the `parallel` feature the closures run on
//! the rayon pool; without it (or with [`Exec::Sequential`]) they run in
//! order on the calling thread. Results are returned in index order either
//! way, so outputs do not depend on the execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Fallible variant of [`map_range`]; the first error by index wins.
pub fn try_map_range<T, E, F>(exec: Exec, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(exec, n, f).into_iter().collect()
}

/// Number of closures that may run at once under `exec`.
pub fn width(exec: Exec) -> usize {
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => rayon::current_num_threads(),
        _ => 1,
    }
}

/// Splits `total` work items into `chunks` near-equal contiguous chunk sizes.
pub fn chunk_sizes(total: usize, chunks: usize) -> Vec<usize> {
    let chunks = chunks.max(1).min(total.max(1));
    let base = total / chunks;
    let extra = total % chunks;
    (0..chunks).map(|c| base + usize::from(c < extra)).collect()
}
