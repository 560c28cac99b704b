use rayon::ThreadPoolBuilder;

/// Runs `f` inside a dedicated pool of `workers` threads, or in the ambient
/// pool when `workers == 0`.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    if workers == 0 {
        return f();
    }
    match ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
