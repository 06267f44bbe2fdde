//! Execution policy for the data-parallel loops (batch featurization, ranking,
//! provider resolution, gradient accumulation).
//!
//! With the `parallel` feature enabled, [`ExecPolicy::Parallel`] runs work on a
//! rayon pool. Without it every policy degrades to the sequential path, so the
//! results are identical either way: all reductions use a fixed chunking and a
//! fixed pairwise combination order.

use std::fmt;
use std::sync::Arc;

/// Rows per leaf of the deterministic reduction tree.
pub const REDUCE_CHUNK: usize = 64;

#[derive(Clone, Default)]
pub enum ExecPolicy {
    #[default]
    Sequential,
    /// Run on a rayon pool. `None` uses the global pool.
    #[cfg(feature = "parallel")]
    Parallel(Option<Arc<rayon::ThreadPool>>),
}

impl fmt::Debug for ExecPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecPolicy::Sequential => f.write_str("Sequential"),
            #[cfg(feature = "parallel")]
            ExecPolicy::Parallel(pool) => match pool {
                Some(p) => write!(f, "Parallel({} threads)", p.current_num_threads()),
                None => f.write_str("Parallel(global)"),
            },
        }
    }
}

impl ExecPolicy {
    /// Policy for a `--jobs N` style knob: `1` is sequential, `0` means "all
    /// cores", anything else caps the worker count.
    pub fn with_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            return ExecPolicy::Sequential;
        }
        Self::parallel_with(jobs)
    }

    #[cfg(feature = "parallel")]
    fn parallel_with(jobs: usize) -> Self {
        if jobs == 0 {
            return ExecPolicy::Parallel(None);
        }
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => ExecPolicy::Parallel(Some(Arc::new(pool))),
            Err(err) => {
                log::warn!("falling back to sequential execution: {err}");
                ExecPolicy::Sequential
            }
        }
    }

    #[cfg(not(feature = "parallel"))]
    fn parallel_with(_jobs: usize) -> Self {
        ExecPolicy::Sequential
    }

    /// The default parallel policy (global pool), or sequential when the
    /// `parallel` feature is off.
    pub fn parallel() -> Self {
        Self::parallel_with(0)
    }

    pub fn is_parallel(&self) -> bool {
        !matches!(self, ExecPolicy::Sequential)
    }

    /// Order-preserving map.
    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            ExecPolicy::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            ExecPolicy::Parallel(pool) => {
                use rayon::prelude::*;
                let run = || items.par_iter().map(&f).collect();
                match pool {
                    Some(pool) => pool.install(run),
                    None => run(),
                }
            }
        }
    }

    /// Deterministic reduction: `leaf` is applied to fixed-size chunks of
    /// `items`, and the partial results are merged pairwise in index order.
    /// The combination tree depends only on `items.len()`, never on thread
    /// scheduling, so floating-point sums are bit-identical across policies.
    pub fn tree_reduce<T, A, L, C>(&self, items: &[T], identity: A, leaf: L, combine: C) -> A
    where
        T: Sync,
        A: Send + Clone,
        L: Fn(&[T]) -> A + Sync + Send,
        C: Fn(A, A) -> A + Sync + Send,
    {
        let chunks: Vec<&[T]> = items.chunks(REDUCE_CHUNK).collect();
        let mut level = self.map(&chunks, |chunk| leaf(chunk));
        if level.is_empty() {
            return identity;
        }
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            let mut iter = level.into_iter();
            while let Some(left) = iter.next() {
                match iter.next() {
                    Some(right) => next.push(combine(left, right)),
                    None => next.push(left),
                }
            }
            level = next;
        }
        level.pop().unwrap_or(identity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u32> = (0..1000).collect();
        let seq = ExecPolicy::Sequential.map(&items, |x| x * 2);
        let par = ExecPolicy::parallel().map(&items, |x| x * 2);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 1998);
    }

    #[test]
    fn tree_reduce_is_bit_identical_across_policies() {
        let items: Vec<f64> = (0..10_007).map(|i| 1.0 / (i as f64 + 0.3)).collect();
        let sum = |chunk: &[f64]| chunk.iter().sum::<f64>();
        let a = ExecPolicy::Sequential.tree_reduce(&items, 0.0, sum, |a, b| a + b);
        let b = ExecPolicy::with_jobs(3).tree_reduce(&items, 0.0, sum, |a, b| a + b);
        let c = ExecPolicy::parallel().tree_reduce(&items, 0.0, sum, |a, b| a + b);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn tree_reduce_empty_returns_identity() {
        let items: Vec<f64> = Vec::new();
        let r = ExecPolicy::Sequential.tree_reduce(&items, 7.0, |c| c.len() as f64, |a, b| a + b);
        assert_eq!(r, 7.0);
    }

    #[test]
    fn jobs_one_is_sequential() {
        assert!(!ExecPolicy::with_jobs(1).is_parallel());
    }
}
