//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] maps
//! through rayon; without it, every mode runs on the calling thread. Results
//! are always returned in input order, so outputs do not depend on the mode.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Runs `f` inside a pool limited to `jobs` threads when parallel.
    pub fn with_jobs<R: Send>(self, jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if let (true, Some(n)) = (self.is_parallel(), jobs) {
            match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                Ok(pool) => return pool.install(f),
                Err(e) => log::warn!("could not build a {n}-thread pool: {e}"),
            }
        }
        let _ = jobs;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..100).collect();
        let a = Execution::Parallel.map(&xs, |x| x * x);
        let b = Execution::Sequential.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }
}
