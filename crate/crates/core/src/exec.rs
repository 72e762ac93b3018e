//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the [`Exec::Parallel`] mode fans work
//! out over rayon's global pool; without it both modes run sequentially. Every
//! helper returns results in index order and reduces in a fixed order, so the
//! output is bitwise identical across modes and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for batch work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps fixed-size chunks of `0..n` and folds the per-chunk results in chunk
/// order. Chunk boundaries depend only on `chunk`, never on thread count.
pub fn chunked_reduce<T, F, R>(exec: Exec, n: usize, chunk: usize, map: F, mut reduce: R) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    R: FnMut(T, T) -> T,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let parts = map_indexed(exec, n_chunks, |c| {
        let lo = c * chunk;
        map(lo..(lo + chunk).min(n))
    });
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, &mut reduce))
}
