//! Execution policy for the data-parallel loops in this crate.
//!
//! Everything parallelized here is a pure map over an index range, so the
//! parallel and sequential paths produce bitwise-identical results and the
//! choice is purely a throughput matter. With the default `parallel` feature
//! the maps run on the rayon global pool; without it they degrade to plain
//! iterators. `map_indexed_seq` is always sequential and exists so benchmarks
//! can compare both paths inside one build.

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_indexed`], kept unconditionally for benchmarks.
pub fn map_indexed_seq<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Runs two closures, concurrently when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn join<A: Send, B: Send>(
    a: impl FnOnce() -> A + Send,
    b: impl FnOnce() -> B + Send,
) -> (A, B) {
    rayon::join(a, b)
}

/// Runs two closures, concurrently when the `parallel` feature is on.
#[cfg(not(feature = "parallel"))]
pub fn join<A: Send, B: Send>(
    a: impl FnOnce() -> A + Send,
    b: impl FnOnce() -> B + Send,
) -> (A, B) {
    (a(), b())
}
