//! Worker budget for the data-parallel kernels.
//!
//! The count comes from `SPRED_THREADS` (default 1) or an explicit
//! [`set_threads`] call. Kernels split work into ranges that depend only on
//! the problem size, never on the worker count, and combine per-range
//! results in range order, so outputs are bitwise identical for any thread
//! setting.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Overrides the worker count. `n` is clamped to at least 1.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Current worker count, reading `SPRED_THREADS` on first use.
pub fn threads() -> usize {
    let cur = THREADS.load(Ordering::Relaxed);
    if cur != 0 {
        return cur;
    }
    let n = std::env::var("SPRED_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    THREADS.store(n, Ordering::Relaxed);
    n
}

/// Splits `0..len` into ranges of `chunk` items (last may be short). The
/// ranges are a function of `len` and `chunk` alone.
pub fn fixed_chunks(len: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    (0..len)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(len))
        .collect()
}

/// Maps `f` over the fixed chunking of `0..len` and returns the results in
/// chunk order. Chunks run on scoped threads when more than one worker is
/// configured; each chunk is computed by exactly one worker.
pub fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> T + Sync,
{
    let ranges = fixed_chunks(len, chunk);
    let workers = threads().min(ranges.len().max(1));
    if workers <= 1 {
        return ranges
            .into_iter()
            .enumerate()
            .map(|(i, r)| f(i, r))
            .collect();
    }
    let f = &f;
    let ranges = &ranges;
    let mut slots: Vec<Option<T>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..ranges.len())
                        .step_by(workers)
                        .map(|i| (i, f(i, ranges[i].clone())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("chunk not run")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_geometry_ignores_worker_count() {
        assert_eq!(fixed_chunks(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(fixed_chunks(4, 4), vec![0..4]);
        assert_eq!(fixed_chunks(0, 4), Vec::<Range<usize>>::new());
    }

    #[test]
    fn map_chunks_keeps_order() {
        let got = map_chunks(11, 3, |i, r| (i, r.start, r.end));
        assert_eq!(got, vec![(0, 0, 3), (1, 3, 6), (2, 6, 9), (3, 9, 11)]);
    }
}
