//! Replication executor: experiment drivers hand out independent
//! tasks indexed by replication number and collect results in index
//! order, so implementations are free to parallelize.

use alloc::vec::Vec;

/// Runs `reps` tasks with indices 0..reps and returns their outputs in
/// index order. Tasks are pure functions of their index (replication
/// RNGs are counter-based), so results must not depend on how the
/// executor schedules them.
pub trait Executor: Sync {
    fn run(&self, reps: usize, task: &(dyn Fn(usize) -> Vec<f64> + Sync)) -> Vec<Vec<f64>>;
}

/// Runs every task on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialExecutor;

impl Executor for SerialExecutor {
    fn run(&self, reps: usize, task: &(dyn Fn(usize) -> Vec<f64> + Sync)) -> Vec<Vec<f64>> {
        (0..reps).map(task).collect()
    }
}
