//! Data-parallel helpers. With the `parallel` feature these run on the rayon pool;
//! without it they fall back to plain iterators. Output order and reduction order are
//! fixed either way, so results are bit-identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per reduction chunk. Partial sums are formed per chunk and then folded in
/// chunk order, which keeps floating-point reductions independent of scheduling.
pub const REDUCE_CHUNK: usize = 64;

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Always-sequential counterpart of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Sums `f(i)` for `i in 0..n` into an accumulator of type `A` using fixed-size chunks.
///
/// `zero` builds an empty accumulator, `add` folds one item into it, `merge` combines
/// two accumulators. Chunk partials are merged left to right.
pub fn chunked_reduce<A, Z, F, M>(n: usize, zero: Z, add: F, merge: M) -> A
where
    A: Send,
    Z: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = zero();
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            add(&mut acc, i);
        }
        acc
    });
    let mut total = zero();
    for p in partials {
        merge(&mut total, p);
    }
    total
}

/// True if any `f(i)` holds. Short-circuits in parallel mode.
pub fn any_indexed<F>(n: usize, f: F) -> bool
where
    F: Fn(usize) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().any(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).any(f)
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (`0` means the rayon default). Without
/// the `parallel` feature `f` simply runs on the calling thread.
pub fn with_threads<T, F>(threads: usize, f: F) -> crate::Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::Error::InvalidParameter(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(f())
    }
}

/// Worker count of the current pool (1 in sequential builds).
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
        assert_eq!(v, map_indexed_seq(1000, |i| i * 2));
    }

    #[test]
    fn chunked_reduce_matches_fixed_order_sum() {
        let f = |i: usize| 1.0 / (1.0 + i as f64);
        let s = chunked_reduce(1000, || 0.0, |a, i| *a += f(i), |a, b| *a += b);
        let mut expect = 0.0;
        for c in 0..1000usize.div_ceil(REDUCE_CHUNK) {
            let mut part = 0.0;
            for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(1000) {
                part += f(i);
            }
            expect += part;
        }
        assert_eq!(s.to_bits(), expect.to_bits());
    }

    #[test]
    fn any_finds_match() {
        assert!(any_indexed(100, |i| i == 77));
        assert!(!any_indexed(100, |i| i == 100));
    }

    #[test]
    fn pool_sizes() {
        assert_eq!(with_threads(1, current_threads).unwrap(), 1);
        let a = with_threads(1, || chunked_reduce(500, || 0.0, |s, i| *s += (i as f64).sqrt(), |a, b| *a += b)).unwrap();
        let b = with_threads(3, || chunked_reduce(500, || 0.0, |s, i| *s += (i as f64).sqrt(), |a, b| *a += b)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
