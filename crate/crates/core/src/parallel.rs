//! Worker pool for data-parallel estimation, capped by `CALM_THREADS`.

use std::sync::OnceLock;

pub const THREADS_ENV: &str = "CALM_THREADS";

/// Worker count: `CALM_THREADS` if set to a positive integer, otherwise
/// the available hardware parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Shared pool sized by [`thread_count`] at first use.
pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .thread_name(|i| format!("calm-worker-{i}"))
            .build()
            .expect("thread pool")
    })
}
