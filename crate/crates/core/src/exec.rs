//! Execution strategy for the data-parallel hot loops (gradient chunks, scoring,
//! generation, Monte-Carlo trials).
//!
//! Work is always split into the same fixed-size units and the per-unit results
//! are combined in index order, so `Sequential` and `Parallel` produce
//! bit-identical output. Without the `parallel` feature, `Parallel` silently
//! runs sequentially.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Map `f` over `0..n`, returning results in index order.
    pub fn map_indexed<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Map `f` over consecutive chunks of `items`, results in chunk order.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        let n = items.len().div_ceil(chunk);
        self.map_indexed(n, |c| {
            let lo = c * chunk;
            f(&items[lo..(lo + chunk).min(items.len())])
        })
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}
