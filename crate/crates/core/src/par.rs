//! Execution helpers for the data-parallel inner loops.
//!
//! Heavy per-pair work (E-step chains, pair scoring, replicate sweeps) is
//! expressed as an indexed map over independent work items so the parallel
//! and sequential paths produce identical output in identical order. With
//! the `parallel` feature (default) the work runs on the rayon pool;
//! without it everything is sequential. `force_sequential` options on the
//! hot entry points pick the fallback at runtime, which is what the
//! benchmarks use to compare the two paths within one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map_items<T, U, F>(sequential: bool, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential {
            return items.par_iter().map(&f).collect();
        }
    }
    let _ = sequential;
    items.iter().map(&f).collect()
}

/// Maps `f` over the index range `0..n`, preserving order.
pub fn map_range<U, F>(sequential: bool, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential {
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    let _ = sequential;
    (0..n).map(&f).collect()
}
