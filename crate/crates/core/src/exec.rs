//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the `map_*` functions fan out over
//! a rayon pool; without it they degrade to plain loops. Results are always
//! collected in input order and reduced sequentially by the callers, so
//! parallel and sequential executions produce bit-identical numbers. The
//! `*_seq` variants are always sequential regardless of features; they back
//! the benchmark suite and the determinism tests.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Configure the global worker pool size. `n = 0` keeps the default
/// (one worker per available CPU). Call at most once, before any parallel
/// work has run; later calls with `n > 0` fail if a pool already exists.
pub fn configure_threads(n: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| crate::Error::InvalidArgument(format!("thread pool: {e}")))?;
        }
        Ok(())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

/// Map `f` over `0..n`, in parallel when enabled; output is in index order.
pub fn map_range<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential counterpart of [`map_range`], available under every feature
/// set (used by benchmarks and parallel-equivalence tests).
pub fn map_range_seq<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Map `f` over a slice with the element index; output is in input order.
pub fn map_indexed<T: Sync, R: Send, F: Fn(usize, &T) -> R + Sync + Send>(
    items: &[T],
    f: F,
) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let par = map_range(100, |i| i * i);
        let seq = map_range_seq(100, |i| i * i);
        assert_eq!(par, seq);

        let items: Vec<u64> = (0..50).collect();
        let got = map_indexed(&items, |i, &x| x + i as u64);
        let want: Vec<u64> = (0..50).map(|i| 2 * i).collect();
        assert_eq!(got, want);
    }
}
