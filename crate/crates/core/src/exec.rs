//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) these dispatch to rayon;
//! without it every path runs sequentially. Results never depend on the
//! choice: each output is produced by exactly one closure call and the
//! order of any reduction is fixed by the caller.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How per-item work (images in a metric pass, chunks of a kernel) is scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` only when the crate was built with rayon support.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, exec: Execution, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

// Below this many output elements the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const KERNEL_PAR_THRESHOLD: usize = 1 << 14;

/// Runs `f(chunk_index, chunk)` over disjoint `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() >= KERNEL_PAR_THRESHOLD && data.len() / chunk > 1 {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Caps the global rayon pool. Returns false if the pool was already built.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
