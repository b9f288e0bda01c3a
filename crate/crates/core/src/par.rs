//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every hot kernel routes its outer loop through these functions. With the
//! `parallel` feature (default) the loops run on rayon; without it, or after
//! `set_sequential(true)`, they run on the calling thread. Both paths perform
//! the identical per-element computation in the identical per-element order,
//! so results are bit-equal regardless of mode or thread count.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the sequential path. Used by the benches to compare
/// modes inside one process; tests may use it to pin down scheduling.
pub fn set_sequential(seq: bool) {
    FORCE_SEQUENTIAL.store(seq, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Run `f(i, chunk)` over `buf` split into `chunk_len`-sized pieces.
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in buf.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Sum per-chunk partial buffers into `acc`, always in chunk order.
///
/// The reduction tree is fixed by `partials` order, not by thread timing, so
/// accumulation is reproducible in both modes.
pub fn sum_partials_into(acc: &mut [f64], partials: &[Vec<f64>]) {
    for p in partials {
        debug_assert_eq!(p.len(), acc.len());
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
}
