//! Worker-count control for op-internal parallelism.
//!
//! `BAPM_THREADS` caps the number of worker threads; `0` forces strict
//! single-threaded execution. All parallel loops split work over disjoint
//! output slices, so results are bitwise identical at any worker count.

use std::sync::OnceLock;

static WORKERS: OnceLock<usize> = OnceLock::new();

/// Number of worker threads ops may use. Resolved once per process.
pub fn worker_count() -> usize {
    *WORKERS.get_or_init(|| match std::env::var("BAPM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => 1,
            Ok(n) => n,
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

/// Runs `f(chunk_index, chunk)` over mutable chunks of `out`, in parallel when
/// more than one worker is configured. Chunks are disjoint, so the write
/// pattern is identical to the serial loop.
pub fn for_each_chunk_mut<T: Send, F>(out: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0);
    let workers = worker_count();
    if workers <= 1 || out.len() <= chunk_len {
        for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let n_chunks = out.len().div_ceil(chunk_len);
    let per_worker = n_chunks.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, span) in out.chunks_mut(per_worker * chunk_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, chunk) in span.chunks_mut(chunk_len).enumerate() {
                    f(w * per_worker + i, chunk);
                }
            });
        }
    });
}
