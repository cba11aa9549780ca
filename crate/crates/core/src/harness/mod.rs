//! Benchmark orchestration: configuration, metrics, persistence, charts and
//! the end-to-end reconstruction pipeline.

pub mod config;
pub mod metrics;
pub mod store;
pub mod svg;
pub mod pipeline;
pub mod validate;

/// Runs `f` on a rayon pool sized by `ROMASSIM_THREADS` when set.
pub fn with_threads<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var("ROMASSIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0);
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}
