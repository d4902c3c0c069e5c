//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) these fan work out over rayon;
//! without it they run plain loops. Results always come back in input order
//! and callers merge them in that order, so the two paths produce bitwise
//! identical floats regardless of thread count.

/// Chunk size for partial-sum accumulation. Gradients over a batch are summed
/// per chunk and the partials merged in chunk order; keeping the size a
/// constant (rather than deriving it from the thread pool) is what makes the
/// parallel total reproducible.
pub const ACCUM_CHUNK: usize = 64;

/// Apply `f` to each index in `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    map_indexed_seq(n, f)
}

/// Sequential twin of [`map_indexed`], always available so benchmarks can
/// compare the two directly.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Map fixed-size chunks of `items` through `f`, collecting partial results
/// in chunk order.
pub fn map_chunks<T, A, F>(items: &[T], f: F) -> Vec<A>
where
    T: Sync,
    A: Send,
    F: Fn(&[T]) -> A + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_chunks(ACCUM_CHUNK).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    map_chunks_seq(items, f)
}

/// Sequential twin of [`map_chunks`].
pub fn map_chunks_seq<T, A, F>(items: &[T], f: F) -> Vec<A>
where
    F: Fn(&[T]) -> A,
{
    items.chunks(ACCUM_CHUNK).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_bitwise() {
        // Values chosen so naive reassociation would change the result.
        let f = |i: usize| (i as f64 * 0.1).sin() * 1e-3 + 1e7;
        let par: Vec<f64> = map_indexed(1000, f);
        let seq: Vec<f64> = map_indexed_seq(1000, f);
        assert_eq!(par, seq);

        let items: Vec<f64> = (0..1000).map(f).collect();
        let sum_chunk = |c: &[f64]| c.iter().sum::<f64>();
        let par_total: f64 = map_chunks(&items, sum_chunk).iter().sum();
        let seq_total: f64 = map_chunks_seq(&items, sum_chunk).iter().sum();
        assert_eq!(par_total.to_bits(), seq_total.to_bits());
    }

    #[test]
    fn chunk_boundaries_ignore_remainders() {
        let items: Vec<usize> = (0..ACCUM_CHUNK * 2 + 7).collect();
        let lens: Vec<usize> = map_chunks(&items, |c| c.len());
        assert_eq!(lens, vec![ACCUM_CHUNK, ACCUM_CHUNK, 7]);
    }
}
