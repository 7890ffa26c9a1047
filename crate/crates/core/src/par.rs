//! Order-preserving data-parallel maps.
//!
//! Results always come back in input order, and every reduction in the crate
//! runs sequentially over those results, so output is identical with or
//! without the `parallel` feature and for any thread count.

pub use self::actual::{is_parallel, map_collect, map_owned};

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    pub fn is_parallel() -> bool {
        true
    }

    /// Maps `source` in parallel, collecting results in input order.
    pub fn map_collect<T, R, F>(source: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        source.par_iter().map(f).collect()
    }

    /// Consumes `source`, mapping in parallel and keeping input order.
    pub fn map_owned<T, R, F>(source: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        source.into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn is_parallel() -> bool {
        false
    }

    /// Maps `source` sequentially.
    pub fn map_collect<T, R, F>(source: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        source.iter().map(f).collect()
    }

    pub fn map_owned<T, R, F>(source: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        source.into_iter().map(f).collect()
    }
}

/// Runs `f` on a pool capped at `jobs` worker threads (`None` or 0 uses the
/// global pool). Without the `parallel` feature this just calls `f`.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = jobs.filter(|&n| n > 0) {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}
