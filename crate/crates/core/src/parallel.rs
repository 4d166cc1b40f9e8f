//! Execution-mode switch for the data-parallel kernels.
//!
//! With the `parallel` feature the hot loops (GEMM row blocks, per-plane
//! normalization, elementwise maps, per-image metric evaluation) fan out over
//! rayon. Without it, or after `set_parallel(false)`, the same loops run
//! sequentially. Work is only ever split across independent outputs, never
//! across a reduction, so both modes produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Minimum number of elements per task before splitting is worth it.
pub(crate) const MIN_SPLIT: usize = 4096;

/// Turn the parallel path on or off at runtime. A no-op request for
/// parallelism is ignored when the crate was built without `parallel`.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Number of workers the parallel path would use (1 when sequential).
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return rayon::current_num_threads();
    }
    1
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `f` over `items`, preserving order.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}
