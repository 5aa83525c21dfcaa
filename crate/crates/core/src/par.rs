//! Ordered map over sample indices, parallel when the `parallel` feature is
//! enabled.
//!
//! Results always come back in index order and every reduction downstream is
//! a sequential fold over that vector, so a run is bit-identical with and
//! without the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items` and collects the results in input order.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
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

/// Sequential variant, always available; used by benches for comparison.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Whether the crate was built with the `parallel` feature.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
