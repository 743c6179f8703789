//! Thread-pool executor for the per-view stages.

use dragscene_core::pipeline::Executor;
use rayon::prelude::*;

use crate::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "DRAGSCENE_THREADS";

pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    /// Available parallelism, capped by `DRAGSCENE_THREADS` when set.
    pub fn from_env() -> Result<Self> {
        Self::new(thread_count(std::env::var(THREADS_ENV).ok().as_deref())?)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

/// Worker count for an optional `DRAGSCENE_THREADS` value.
pub fn thread_count(env: Option<&str>) -> Result<usize> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(available),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(available)),
            _ => Err(Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

impl Executor for RayonExecutor {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        self.pool.install(|| items.into_par_iter().map(f).collect())
    }
}
