//! Trajectory-level parallelism. With the `parallel` feature disabled every
//! path here runs sequentially; results are identical either way because
//! reductions always happen in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether work actually fans out in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// `f(start..end)` collected in index order.
pub fn map_indexed<T, F>(start: usize, end: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return (start..end).into_par_iter().map(f).collect();
    }
    let _ = par;
    (start..end).map(f).collect()
}

/// Evaluates `f(0..n)` in chunks of `chunk` and folds every result into
/// `acc` in index order. Memory stays bounded by one chunk of results.
pub fn fold_ordered<T, A, F, G>(n: usize, chunk: usize, par: Parallelism, f: F, acc: &mut A, mut fold: G)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
    G: FnMut(&mut A, usize, T),
{
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        for (offset, item) in map_indexed(start, end, par, &f).into_iter().enumerate() {
            fold(acc, start + offset, item);
        }
        start = end;
    }
}
