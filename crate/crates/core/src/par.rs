//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into numbered streams; each stream owns an RNG seeded from
//! `(seed, stream)`, so results do not depend on thread count or on whether
//! the `parallel` feature is enabled. Results are always returned in stream
//! order and reductions over them happen sequentially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draws per RNG stream in the Monte-Carlo helpers.
pub const STREAM_LEN: usize = 1 << 14;

/// Independent RNG for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sequential map over `0..n` preserving order.
pub fn map_indices_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Rayon map over `0..n` preserving order.
#[cfg(feature = "parallel")]
pub fn map_indices_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map over `0..n`, in parallel when the `parallel` feature is on.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indices_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indices_seq(n, f)
    }
}

/// Splits `total` draws into `(stream, len)` chunks of at most [`STREAM_LEN`].
pub fn stream_chunks(total: usize) -> Vec<(u64, usize)> {
    let mut out = Vec::with_capacity(total.div_ceil(STREAM_LEN));
    let mut left = total;
    let mut stream = 0u64;
    while left > 0 {
        let len = left.min(STREAM_LEN);
        out.push((stream, len));
        left -= len;
        stream += 1;
    }
    out
}

/// Runs `draw` `total` times across seeded streams and folds each stream
/// into an accumulator; per-stream accumulators are merged in stream order.
pub fn monte_carlo<A, Init, Draw, Merge>(
    total: usize,
    seed: u64,
    init: Init,
    draw: Draw,
    merge: Merge,
) -> A
where
    A: Send,
    Init: Fn() -> A + Sync + Send,
    Draw: Fn(&mut A, &mut ChaCha8Rng) + Sync + Send,
    Merge: Fn(&mut A, A),
{
    let chunks = stream_chunks(total);
    let parts = map_indices(chunks.len(), |k| {
        let (stream, len) = chunks[k];
        let mut rng = stream_rng(seed, stream);
        let mut acc = init();
        for _ in 0..len {
            draw(&mut acc, &mut rng);
        }
        acc
    });
    let mut out = init();
    for p in parts {
        merge(&mut out, p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chunks_cover_total() {
        let c = stream_chunks(STREAM_LEN * 2 + 5);
        assert_eq!(c.len(), 3);
        assert_eq!(c.iter().map(|x| x.1).sum::<usize>(), STREAM_LEN * 2 + 5);
        assert!(stream_chunks(0).is_empty());
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let run = || {
            monte_carlo(
                100_000,
                9,
                || 0u64,
                |acc, rng| *acc += rng.random_range(0..10u64),
                |a, b| *a += b,
            )
        };
        assert_eq!(run(), run());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let f = |i: usize| {
            let mut rng = stream_rng(5, i as u64);
            rng.random::<u64>()
        };
        assert_eq!(map_indices_seq(50, f), map_indices_par(50, f));
    }
}
