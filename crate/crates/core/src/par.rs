//! Row-parallel helpers. With the `parallel` feature these run on the current
//! rayon pool; without it they are plain sequential loops. Every helper
//! produces the same bits either way: work is split by row and no reduction
//! depends on the partitioning.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum rows per rayon task; keeps tiny matrices off the pool.
#[cfg(feature = "parallel")]
const MIN_ROWS_PER_TASK: usize = 256;

/// Evaluates `f(i)` for `i in 0..n`, collected in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n)
            .into_par_iter()
            .with_min_len(MIN_ROWS_PER_TASK)
            .map(f)
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_range`] but one rayon task per index, for a handful of heavy jobs.
pub fn map_tasks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().with_max_len(1).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fills `out[i] = f(i)`.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_iter_mut()
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(i, slot)| *slot = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = f(i);
        }
    }
}

/// Applies `f(row_index, row)` to each `width`-sized chunk of `data`.
pub fn for_each_row_mut<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(width)
            .with_min_len(MIN_ROWS_PER_TASK.div_ceil(width.max(1)).max(1))
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in data.chunks_mut(width).enumerate() {
            f(i, row);
        }
    }
}

/// Index-ordered maximum of `score(i)` over `i in 0..n` where `keep(i)` holds.
/// Ties resolve to the smallest index. NaN scores are never selected.
pub fn argmax_by<S, K>(n: usize, keep: K, score: S) -> Option<(usize, f64)>
where
    S: Fn(usize) -> f64 + Sync + Send,
    K: Fn(usize) -> bool + Sync + Send,
{
    let better = |a: Option<(usize, f64)>, b: Option<(usize, f64)>| match (a, b) {
        (None, x) | (x, None) => x,
        (Some(x), Some(y)) => {
            if y.1 > x.1 || (y.1 == x.1 && y.0 < x.0) {
                Some(y)
            } else {
                Some(x)
            }
        }
    };
    let lift = |i: usize| {
        if !keep(i) {
            return None;
        }
        let s = score(i);
        if s.is_nan() {
            None
        } else {
            Some((i, s))
        }
    };
    #[cfg(feature = "parallel")]
    {
        (0..n)
            .into_par_iter()
            .with_min_len(MIN_ROWS_PER_TASK)
            .map(lift)
            .reduce(|| None, better)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(lift).fold(None, better)
    }
}

/// Runs `f` with at most `threads` workers (0 = library default). Results do
/// not depend on the thread count.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(err) => {
                log::warn!("could not build a {threads}-thread pool ({err}); using the global pool");
                f()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
