//! Ordered fan-out over independent work items.
//!
//! With the `parallel` feature and more than one thread the items run on a
//! rayon pool; otherwise they run in order on the calling thread. Results
//! always come back in input order, so callers see identical output either
//! way.

pub const THREADS_ENV: &str = "DIFFGRAPH_THREADS";

/// Thread cap from `DIFFGRAPH_THREADS`; 1 when unset or unparsable.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if threads > 1 && items.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = threads;
    items.iter().map(f).collect()
}
