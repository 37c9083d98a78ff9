//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's global
//! pool; without it they run the same closures sequentially. Results are
//! always merged in index order, so output never depends on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Smallest `i` in `0..n` for which `f` returns `Some`, with its value.
/// Work is split into chunks of `chunk` indices; `init` builds per-chunk
/// scratch state.
pub fn find_first<S, T, I, F>(n: u64, chunk: u64, init: I, f: F) -> Option<(u64, T)>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, u64) -> Option<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        find_first_par(n, chunk, init, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        find_first_seq(n, chunk, init, f)
    }
}

pub fn find_first_seq<S, T, I, F>(n: u64, _chunk: u64, init: I, f: F) -> Option<(u64, T)>
where
    I: Fn() -> S,
    F: Fn(&mut S, u64) -> Option<T>,
{
    let mut state = init();
    (0..n).find_map(|i| f(&mut state, i).map(|v| (i, v)))
}

#[cfg(feature = "parallel")]
pub fn find_first_par<S, T, I, F>(n: u64, chunk: u64, init: I, f: F) -> Option<(u64, T)>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, u64) -> Option<T> + Sync + Send,
{
    let chunk = chunk.max(1);
    let chunks = n.div_ceil(chunk);
    (0..chunks).into_par_iter().find_map_first(|c| {
        let mut state = init();
        let lo = c * chunk;
        let hi = (lo + chunk).min(n);
        (lo..hi).find_map(|i| f(&mut state, i).map(|v| (i, v)))
    })
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Folds chunked index ranges with `fold` and merges the per-chunk results
/// left to right with `merge`.
pub fn fold_chunks<S, A, I, F, M>(n: u64, chunk: u64, init: I, fold: F, merge: M) -> Option<A>
where
    A: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, std::ops::Range<u64>) -> A + Sync + Send,
    M: Fn(A, A) -> A,
{
    let chunk = chunk.max(1);
    let chunks: Vec<u64> = (0..n.div_ceil(chunk)).collect();
    let parts = map(&chunks, |&c| {
        let mut state = init();
        let lo = c * chunk;
        fold(&mut state, lo..(lo + chunk).min(n))
    });
    parts.into_iter().reduce(merge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn find_first_returns_lowest_index() {
        let hit = find_first(
            100_000,
            1000,
            || (),
            |_, i| (i % 777 == 776).then_some(i * 2),
        );
        assert_eq!(hit, Some((776, 1552)));
        assert_eq!(find_first(10, 3, || (), |_, _| None::<()>), None);
        assert_eq!(
            find_first_seq(100_000, 1, || (), |_, i| (i % 777 == 776).then_some(i)),
            Some((776, 776))
        );
    }

    #[test]
    fn fold_chunks_merges_in_order() {
        let v = fold_chunks(
            10,
            3,
            || (),
            |_, r| r.collect::<Vec<_>>(),
            |mut a, b| {
                a.extend(b);
                a
            },
        );
        assert_eq!(v, Some((0..10).collect()));
        assert_eq!(
            fold_chunks(0, 3, || (), |_, r| r.count(), |a, b| a + b),
            None
        );
    }
}
