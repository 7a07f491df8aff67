//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! rayon's current pool; without it every loop runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(plane_index, plane)` over consecutive `plane_len` chunks of `out`.
pub(crate) fn for_each_plane<F>(out: &mut [f32], plane_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(plane_len).enumerate().for_each(|(i, p)| f(i, p));

    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(plane_len).enumerate().for_each(|(i, p)| f(i, p));
}

/// Maps `f` over `0..n`, preserving order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Whether this build was compiled with data parallelism.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// A worker pool of fixed size. In sequential builds it runs closures inline.
pub struct Pool {
    #[cfg(feature = "parallel")]
    inner: Option<rayon::ThreadPool>,
    threads: usize,
}

impl Pool {
    pub fn new(threads: usize) -> Self {
        let threads = threads.max(1);
        #[cfg(feature = "parallel")]
        {
            let inner = rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok();
            let threads = if inner.is_some() {
                threads
            } else {
                rayon::current_num_threads()
            };
            Pool { inner, threads }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Pool { threads: 1 }
        }
    }

    /// Worker count actually in effect.
    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.inner {
            return pool.install(f);
        }
        f()
    }
}

/// Runs `f` on a fresh pool with `threads` workers and returns its result
/// together with the thread count actually used.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> (T, usize) {
    let pool = Pool::new(threads);
    (pool.install(f), pool.threads())
}
