//! Data-parallel helpers with a deterministic contract.
//!
//! Every helper here assigns each output element to exactly one task and
//! performs no cross-task floating-point reduction, so results are
//! bit-identical whether the work runs on rayon or sequentially. The
//! `parallel` feature gates rayon entirely; with it enabled, a runtime
//! switch can still force sequential execution (used by the benches to
//! compare both paths in one binary).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution at runtime even when the `parallel` feature is on.
pub fn set_force_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::Relaxed);
}

/// True when work should run on the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Map a slice through `f`, collecting results in input order.
pub fn map_slice<'a, I, T, F>(items: &'a [I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&'a I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Apply `f` to disjoint row chunks of `data` (each `row_len` wide).
///
/// `f(first_row_index, chunk)` must derive every output purely from its own
/// chunk; chunk boundaries are fixed by `rows_per_chunk` so scheduling cannot
/// change results.
pub fn for_each_row_chunk<F>(data: &mut [f64], row_len: usize, rows_per_chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(row_len > 0 && rows_per_chunk > 0);
    let chunk = row_len * rows_per_chunk;
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i * rows_per_chunk, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i * rows_per_chunk, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_order_is_stable() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let a = map_indexed(64, |i| (i as f64).sin());
        set_force_sequential(true);
        let b = map_indexed(64, |i| (i as f64).sin());
        set_force_sequential(false);
        assert_eq!(a, b);
    }
}

/// Consume jobs in parallel; each job owns disjoint data.
pub fn for_each_job<T, F>(jobs: Vec<T>, f: F)
where
    T: Send,
    F: Fn(T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        jobs.into_par_iter().for_each(f);
        return;
    }
    jobs.into_iter().for_each(f);
}
