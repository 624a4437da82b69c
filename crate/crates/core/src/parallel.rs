//! Optional data parallelism with results independent of the thread count.
//!
//! Work is always split into the same fixed chunks; workers only change who
//! computes a chunk, and results are combined in chunk order.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub struct Parallelism {
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parallelism")
            .field("threads", &self.threads())
            .finish()
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::sequential()
    }
}

impl Parallelism {
    /// Everything runs on the calling thread.
    pub fn sequential() -> Self {
        Parallelism { pool: None }
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Parallelism::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
        Ok(Parallelism { pool: Some(pool) })
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// `(0..n).map(f)` with results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}
