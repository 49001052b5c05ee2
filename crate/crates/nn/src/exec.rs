//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature disabled, [`Execution::Parallel`] runs the
//! same loops sequentially, so results never depend on the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether this build can actually run work on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Calls `f(i)` for `i in 0..n` and collects the results in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Current worker count; 1 for sequential execution.
    pub fn workers(self) -> usize {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return rayon::current_num_threads();
        }
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let a = Execution::Parallel.map(100, |i| (i * i) as f64);
        let b = Execution::Sequential.map(100, |i| (i * i) as f64);
        assert_eq!(a, b);
        let mut x = vec![0usize; 10];
        Execution::Parallel.for_each_chunk(&mut x, 3, |i, c| c.iter_mut().for_each(|v| *v = i));
        assert_eq!(x, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
