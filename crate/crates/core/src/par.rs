//! Slice-level work distribution.
//!
//! Each item owns a disjoint region of the outputs, so the result never
//! depends on how items are assigned to workers.

use alloc::vec::Vec;

#[cfg(feature = "parallel")]
pub(crate) fn map_items<A, R, F>(items: Vec<A>, f: F) -> Vec<R>
where
    A: Send,
    R: Send,
    F: Fn(usize, A) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().enumerate().map(|(i, a)| f(i, a)).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_items<A, R, F>(items: Vec<A>, f: F) -> Vec<R>
where
    F: Fn(usize, A) -> R,
{
    items.into_iter().enumerate().map(|(i, a)| f(i, a)).collect()
}
