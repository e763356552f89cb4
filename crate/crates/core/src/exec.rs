//! Execution mode for the data-parallel loops.
//!
//! Candidate ranking over the corpus, the per-pair sweep and the stability
//! sweep all go through [`Exec::map`]. With the `parallel` feature disabled
//! every mode runs sequentially, so results never depend on the mode.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            Exec::Parallel => par_map(items, f),
        }
    }

    /// Order-preserving filter-map over a slice.
    pub fn filter_map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Option<R> + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().filter_map(f).collect(),
            Exec::Parallel => par_filter_map(items, f),
        }
    }

    /// Order-preserving filter-map over `0..n`.
    pub fn filter_map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> Option<R> + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).filter_map(f).collect(),
            Exec::Parallel => par_filter_map_range(n, f),
        }
    }

    /// Sorts in place; the comparator must be a total order so both modes
    /// agree.
    pub fn sort_by<T, F>(self, items: &mut [T], cmp: F)
    where
        T: Send,
        F: Fn(&T, &T) -> std::cmp::Ordering + Sync,
    {
        match self {
            Exec::Sequential => items.sort_by(cmp),
            Exec::Parallel => par_sort_by(items, cmp),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_filter_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Option<R> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().filter_map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_filter_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> Option<R>,
{
    items.iter().filter_map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_filter_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> Option<R> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().filter_map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_filter_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> Option<R>,
{
    (0..n).filter_map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_sort_by<T, F>(items: &mut [T], cmp: F)
where
    T: Send,
    F: Fn(&T, &T) -> std::cmp::Ordering + Sync,
{
    use rayon::prelude::*;
    items.par_sort_by(cmp)
}

#[cfg(not(feature = "parallel"))]
fn par_sort_by<T, F>(items: &mut [T], cmp: F)
where
    F: Fn(&T, &T) -> std::cmp::Ordering,
{
    items.sort_by(cmp)
}
