//! Path-parallel execution over fixed-size chunks of path indices.
//!
//! Work is split into chunks of [`CHUNK`] consecutive path indices. Each chunk
//! yields one partial result and the partials come back in chunk order, so a
//! sequential fold over them is bit-reproducible regardless of scheduling.

use std::ops::Range;

pub const CHUNK: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

pub fn chunk_ranges(total: u64, chunk: u64) -> Vec<Range<u64>> {
    let chunk = chunk.max(1);
    (0..total.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(total))
        .collect()
}

/// Applies `f` to every chunk of `0..total`, returning results in chunk order.
pub fn map_chunks<T, F>(total: u64, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<u64>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(total, CHUNK);
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            ranges.into_par_iter().map(f).collect()
        }
        _ => ranges.into_iter().map(f).collect(),
    }
}

/// Fallible variant of [`map_chunks`]; the first error in chunk order wins.
pub fn try_map_chunks<T, E, F>(total: u64, mode: ExecMode, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(Range<u64>) -> Result<T, E> + Sync + Send,
{
    map_chunks(total, mode, f).into_iter().collect()
}

/// Sizes the global worker pool. Returns false if it was already initialised
/// or the crate was built without the `parallel` feature.
pub fn configure_threads(threads: usize) -> bool {
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

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
