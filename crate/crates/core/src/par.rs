//! Deterministic fork-join over index ranges.
//!
//! Chunk sizes depend only on the job count, every output slot is written
//! by exactly one closure call, and reductions combine partials in chunk
//! order, so results are bitwise independent of how many threads run.

use std::sync::atomic::{AtomicUsize, Ordering};

fn workers_for(jobs: usize) -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs)
}

fn chunk_size(n: usize) -> usize {
    (n / 256).max(1)
}

/// Runs `take(chunk_index)` under work stealing and hands each result back
/// keyed by its chunk, single-threaded when that is all the job warrants.
fn run_chunks<T: Send>(n: usize, per_chunk: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    let chunk = chunk_size(n);
    let nchunks = n.div_ceil(chunk);
    let bounds = |c: usize| (c * chunk, ((c + 1) * chunk).min(n));
    let workers = workers_for(nchunks);
    if workers <= 1 {
        return (0..nchunks)
            .map(|c| {
                let (a, b) = bounds(c);
                per_chunk(a, b)
            })
            .collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..nchunks).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let next = &next;
                let per_chunk = &per_chunk;
                s.spawn(move || {
                    let mut got: Vec<(usize, T)> = Vec::new();
                    loop {
                        let c = next.fetch_add(1, Ordering::Relaxed);
                        if c >= nchunks {
                            break;
                        }
                        let (a, b) = bounds(c);
                        got.push((c, per_chunk(a, b)));
                    }
                    got
                })
            })
            .collect();
        for h in handles {
            for (c, v) in h.join().expect("parallel worker panicked") {
                slots[c] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("chunk not computed")).collect()
}

/// Parallel `(0..n).map(f)`, order preserved.
pub fn map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let pieces = run_chunks(n, |a, b| (a..b).map(&f).collect::<Vec<T>>());
    let mut out = Vec::with_capacity(n);
    for p in pieces {
        out.extend(p);
    }
    out
}

/// Parallel sum of `f(i)` over `0..n`; within a chunk terms add in index
/// order and partials add in chunk order.
pub fn sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    run_chunks(n, |a, b| {
        let mut acc = 0.0;
        for i in a..b {
            acc += f(i);
        }
        acc
    })
    .iter()
    .sum()
}

/// Parallel max of `f(i)` over `0..n`; `NEG_INFINITY` when empty.
pub fn max(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    run_chunks(n, |a, b| {
        let mut acc = f64::NEG_INFINITY;
        for i in a..b {
            acc = acc.max(f(i));
        }
        acc
    })
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max)
}
