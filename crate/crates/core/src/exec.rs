//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature the helpers here dispatch to rayon unless the
//! process-wide mode was switched to [`Mode::Sequential`]. Without the feature
//! they always run sequentially. Callers must not rely on evaluation order:
//! each item gets its own RNG stream and reductions happen after collection.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static SEQUENTIAL: AtomicBool = AtomicBool::new(!cfg!(feature = "parallel"));

pub fn set_mode(mode: Mode) {
    SEQUENTIAL.store(mode == Mode::Sequential, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::SeqCst) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but short-circuits on the first error (by index order
/// of the collected output, not of evaluation).
pub fn try_map_indexed<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Applies `f` to every element of a mutable slice, passing the element index.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
        return;
    }
    items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}
