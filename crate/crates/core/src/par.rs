//! Replication-level parallelism.
//!
//! Every replication owns its own Poisson paths keyed by its index, so the
//! work items are independent. Results are always collected in replication
//! order, which keeps downstream reductions bit-stable whatever the thread
//! count. Without the `parallel` feature everything runs on the caller's
//! thread.

use crate::error::{Result, RteError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

/// `[f(0), f(1), …, f(count - 1)]`, in order.
pub fn map_replications<T, F>(execution: Execution, count: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Runs `f` on a pool with `threads` workers (or the global pool for `None`).
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        #[cfg(feature = "parallel")]
        Some(n) => {
            if n == 0 {
                return Err(RteError::Config("thread count must be at least 1".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| RteError::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        #[cfg(not(feature = "parallel"))]
        Some(0) => Err(RteError::Config("thread count must be at least 1".into())),
        _ => Ok(f()),
    }
}
