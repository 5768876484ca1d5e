//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! plain sequential loops with identical results. All call sites are written
//! against this module so both builds share one code path.

use ndarray::{ArrayViewMut, Axis, Dimension, RemoveAxis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f(index, subview)` for every subview along the leading axis.
pub fn for_each_outer<A, D, F>(mut view: ArrayViewMut<'_, A, D>, f: F)
where
    A: Send + Sync,
    D: Dimension + RemoveAxis,
    F: Fn(usize, ArrayViewMut<'_, A, D::Smaller>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        view.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, sub)| f(i, sub));
    }
    #[cfg(not(feature = "parallel"))]
    {
        view.axis_iter_mut(Axis(0))
            .enumerate()
            .for_each(|(i, sub)| f(i, sub));
    }
}

/// Maps over `0..n` and folds the results with `reduce`, e.g. summing
/// per-sample gradient contributions.
pub fn map_reduce<R, F, G>(n: usize, f: F, reduce: G) -> Option<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
    G: Fn(R, R) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).reduce_with(reduce)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).reduce(reduce)
    }
}

/// Number of worker threads the helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
