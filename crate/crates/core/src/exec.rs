//! Data-parallel execution with a sequential fallback.

/// How data-parallel loops are executed.
///
/// `Parallel` uses rayon when the crate is built with the `parallel`
/// feature; without it, `Parallel` degrades to `Sequential`. Every helper
/// here returns results in input order, so callers that reduce the output
/// sequentially get bit-identical results under both strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run loops on multiple threads.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * x);
        let par = Execution::Parallel.map(&xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(
            Execution::Sequential.map_range(17, |i| i as f64 / 3.0),
            Execution::Parallel.map_range(17, |i| i as f64 / 3.0)
        );
    }
}
