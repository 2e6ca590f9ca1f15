//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, [`Parallelism::Threads`] maps work items on
//! the rayon pool; without it every call runs sequentially. Results always
//! come back in input order, so reductions over them are deterministic.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Threads,
}

impl Parallelism {
    /// Whether `Threads` actually uses worker threads in this build.
    pub const AVAILABLE: bool = cfg!(feature = "parallel");

    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Threads => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<O, F>(self, n: usize, f: F) -> Vec<O>
    where
        O: Send,
        F: Fn(usize) -> O + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Threads => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Runs `f` with worker parallelism capped at `threads` (if given).
pub fn with_thread_cap<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            return pool.install(f);
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    f()
}

/// Worker cap from the `LANO_THREADS` environment variable.
pub fn env_thread_cap() -> Option<usize> {
    std::env::var("LANO_THREADS").ok()?.trim().parse().ok()
}
