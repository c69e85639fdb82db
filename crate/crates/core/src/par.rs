//! Data-parallel helpers. With the `parallel` feature the maps run on the
//! rayon pool unless switched off at runtime; without it they are plain loops.
//! Results are always collected in input order so reductions stay deterministic.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch used by the benches to compare both code paths.
pub fn set_parallel(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn parallel_active() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            return items.par_iter().with_min_len(4).map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().with_min_len(4).map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
