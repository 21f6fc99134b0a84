//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! plain iterator loops. Every helper produces results in index order, so the
//! output is bit-identical whichever path runs. [`set_parallel`] toggles the
//! parallel path at runtime (benchmarks use it to compare both).

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work below this many scalar operations stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

pub fn set_parallel(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fills `out` in chunks of `chunk` elements; `f(chunk_index, chunk)`.
/// `work` is an estimate of total scalar operations; small jobs run inline.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= MIN_PARALLEL_WORK {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indices(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut buf = vec![0usize; 1 << 16];
        for_each_chunk(&mut buf, 7, usize::MAX, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 7 + j;
            }
        });
        assert!(buf.iter().enumerate().all(|(i, &x)| i == x));
    }
}
