//! Thin indirection over rayon so the crate builds with a sequential
//! fallback (`--no-default-features`). `HTH_THREADS` caps the pool size.

/// Read the `HTH_THREADS` cap, if set and valid.
pub fn thread_cap() -> Option<usize> {
    std::env::var("HTH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
}

#[cfg(feature = "parallel")]
mod imp {
    use super::thread_cap;

    /// Configure the global rayon pool from `HTH_THREADS`. Safe to call more
    /// than once; only the first call wins.
    pub fn init_threads() {
        if let Some(n) = thread_cap() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    /// Run `f` inside a dedicated pool of `n` threads (timing isolation).
    pub fn run_with_threads<R: Send>(n: usize, f: impl FnOnce() -> R + Send) -> R {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool");
        pool.install(f)
    }

    /// Indexed map over `0..n`, parallel when the pool allows it; output
    /// order (and therefore downstream reductions) is deterministic.
    pub fn par_map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn init_threads() {}

    pub fn run_with_threads<R: Send>(_n: usize, f: impl FnOnce() -> R + Send) -> R {
        f()
    }

    pub fn par_map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        (0..n).map(f).collect()
    }
}

pub use imp::{init_threads, par_map_indexed, run_with_threads};
