//! Data-parallel helpers with a sequential fallback.
//!
//! Every kernel in this crate parallelizes only over independent output
//! cells and keeps all reductions in a fixed order, so the parallel and
//! sequential paths produce bitwise-identical results. With the `parallel`
//! feature disabled rayon is not compiled in at all; with it enabled,
//! [`set_sequential`] can force the sequential path at runtime (used by the
//! benchmarks to compare both).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is enabled.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_sequential() -> bool {
    if cfg!(not(feature = "parallel")) {
        return true;
    }
    FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Apply `f(chunk_index, chunk)` over disjoint consecutive chunks of `data`.
pub fn chunks_mut_indexed<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(size > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            data.par_chunks_mut(size)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(size).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let run = || {
            let mut out = vec![0.0f64; 1000];
            chunks_mut_indexed(&mut out, 7, |i, c| {
                for (j, v) in c.iter_mut().enumerate() {
                    *v = ((i * 31 + j) as f64).sin() * 1e-3;
                }
            });
            out
        };
        let par = run();
        set_sequential(true);
        let seq = run();
        set_sequential(false);
        assert_eq!(par, seq);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v[7], 14);
        assert_eq!(v.len(), 100);
    }
}
