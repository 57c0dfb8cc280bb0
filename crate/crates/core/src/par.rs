//! Optional data parallelism for inner loops.
//!
//! `LSKSA_THREADS` caps the worker count; unset or 0 keeps everything on the
//! calling thread. Work is split into disjoint output chunks whose contents do
//! not depend on the split, so results are bitwise identical for any count.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "LSKSA_THREADS";

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        if threads <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    })
    .as_ref()
}

pub fn threads() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

/// Calls `f(index, chunk)` for every `chunk_len`-sized piece of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match pool() {
        Some(p) if data.len() > chunk_len => p.install(|| {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }),
        _ => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// `(0..n).map(f)` collected in index order, possibly on the worker pool.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool() {
        Some(p) if n > 1 => p.install(|| (0..n).into_par_iter().map(f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
