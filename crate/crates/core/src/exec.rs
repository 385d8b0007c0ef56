//! Sequential / data-parallel execution switch.
//!
//! With the `parallel` feature disabled every mode runs sequentially. Results
//! never depend on the mode: callers only map independent items and reduce
//! the returned `Vec` in index order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// True when work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Applies `f` to every element of `items`, returning results in order.
    pub fn map_mut<T, R, F>(self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter_mut().map(f).collect();
        }
        items.iter_mut().map(f).collect()
    }

    /// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut a: Vec<u64> = (0..1000).collect();
        let mut b = a.clone();
        let ra = Execution::Sequential.map_mut(&mut a, |x| {
            *x *= 3;
            *x + 1
        });
        let rb = Execution::Parallel.map_mut(&mut b, |x| {
            *x *= 3;
            *x + 1
        });
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(
            Execution::Sequential.map_range(50, |i| i * i),
            Execution::Parallel.map_range(50, |i| i * i)
        );
    }
}
