//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the indexed maps run on rayon;
//! without it they run sequentially. Because all randomness is counter-based
//! (see [`crate::streams`]), both paths produce identical results — the
//! criterion bench suite compares their throughput, and tests assert their
//! equality.

/// Execution strategy for the entry points that expose one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    /// rayon work-stealing when the `parallel` feature is on; otherwise
    /// equivalent to `Sequential`.
    Auto,
    /// Force a plain sequential loop.
    Sequential,
}

/// Map `f` over `0..n`, parallel when available.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, parallel when available.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential indexed map, always available (bench baseline).
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Map honoring an explicit [`Parallelism`] choice.
pub fn map_indexed_with<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Parallelism::Auto => map_indexed(n, f),
        Parallelism::Sequential => map_indexed_seq(n, f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let par = map_indexed(1000, |i| crate::streams::mix(3, &[i as u64]));
        let seq = map_indexed_seq(1000, |i| crate::streams::mix(3, &[i as u64]));
        assert_eq!(par, seq);
    }
}
