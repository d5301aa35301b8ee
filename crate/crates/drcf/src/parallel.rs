//! Rayon-backed replication executor. Tasks are pure functions of the
//! replication index (counter-based RNG streams), and `collect` on an
//! indexed parallel iterator preserves index order, so results are
//! identical for every thread count.

use rayon::iter::{IntoParallelIterator, ParallelIterator};
use rayon::ThreadPool;

use drcf_core::{Error, Executor, Result};

pub struct RayonExecutor {
    pool: ThreadPool,
}

impl RayonExecutor {
    /// `threads` = None uses machine parallelism.
    pub fn new(threads: Option<usize>) -> Result<Self> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            builder = builder.num_threads(t);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Validation(format!("cannot build the thread pool: {e}")))?;
        Ok(RayonExecutor { pool })
    }
}

impl Executor for RayonExecutor {
    fn run(&self, reps: usize, task: &(dyn Fn(usize) -> Vec<f64> + Sync)) -> Vec<Vec<f64>> {
        self.pool
            .install(|| (0..reps).into_par_iter().map(task).collect())
    }
}
