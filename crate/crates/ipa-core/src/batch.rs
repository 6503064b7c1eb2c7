//! Index-ordered batch execution for independent runs.
//!
//! Campaigns and profiling execute many independent VM runs; results are
//! collected by index, so the parallel and sequential paths produce
//! identical vectors. With the `parallel` feature (default) the work is
//! spread over a rayon pool; without it everything runs sequentially.

/// Run `f` for `0..count` sequentially. Baseline path, always available.
pub fn map_indexed_seq<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(count, f)
}

/// Run `f` over `0..count` on `jobs` worker threads (0 = rayon default).
/// `jobs == 1` uses the plain sequential path.
#[cfg(feature = "parallel")]
pub fn map_indexed_jobs<T, F>(count: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if jobs == 1 {
        return map_indexed_seq(count, f);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if jobs > 0 {
        builder = builder.num_threads(jobs);
    }
    match builder.build() {
        Ok(pool) => pool.install(|| map_indexed(count, f)),
        Err(_) => map_indexed_seq(count, f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed_jobs<T, F>(count: usize, _jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(count, f)
}
