//! Execution seams for batch-level parallelism.
//!
//! Every hot loop in the crate funnels through [`map`], which runs on rayon
//! when the `parallel` feature is enabled and sequentially otherwise. The
//! parallel path is an ordered map followed by an ordered collect, so both
//! paths produce bit-identical output and callers never observe the
//! difference. [`map_seq`] is always available; benchmarks use it as the
//! baseline when the crate is built with the feature on.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
///
/// Output order always matches input order. Any fold over the result must be
/// performed by the caller, sequentially, so that floating-point reduction
/// order does not depend on thread scheduling.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
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

/// Sequential twin of [`map`], compiled unconditionally.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps `f` over the index range `0..n`; parallel under the feature flag.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Sequential twin of [`map_range`].
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
