//! Worker dispatch for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) loops run on the rayon pool; without
//! it the same code degrades to plain sequential iteration. Callers can also
//! force the sequential path at runtime with [`run_sequential`], which is what
//! the benches use to compare both modes in one process.
//!
//! Every loop here partitions *output* elements: each output row is produced
//! by exactly one worker with a fixed-order inner loop, so results are
//! bit-identical for any worker count.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Rows below this threshold are not worth shipping to the pool.
pub const PAR_MIN_ROWS: usize = 4;

struct SeqGuard(bool);

impl Drop for SeqGuard {
    fn drop(&mut self) {
        let prev = self.0;
        FORCE_SEQUENTIAL.with(|c| c.set(prev));
    }
}

/// Runs `f` with all [`for_each_row`] / [`map_range`] calls on the current
/// thread forced down the sequential path. Nests and unwinds safely.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let _guard = SeqGuard(FORCE_SEQUENTIAL.with(|c| c.replace(true)));
    f()
}

/// True when the current thread is inside [`run_sequential`].
pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Caps the global worker pool. Returns false when the pool was already
/// built (rayon allows exactly one global configuration per process).
/// Without the `parallel` feature this is a no-op.
pub fn configure_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        true
    }
}

/// Number of workers the parallel path would use right now.
pub fn current_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        if sequential_forced() {
            1
        } else {
            rayon::current_num_threads()
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn use_pool(rows: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rows >= PAR_MIN_ROWS && !sequential_forced() && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = rows;
        false
    }
}

/// Applies `f(row_index, row)` over `data` viewed as rows of `cols` elements.
pub fn for_each_row<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if data.is_empty() || cols == 0 {
        return;
    }
    let rows = data.len() / cols;
    debug_assert_eq!(rows * cols, data.len());
    if use_pool(rows) {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Order-preserving parallel map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    if use_pool(n) {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
