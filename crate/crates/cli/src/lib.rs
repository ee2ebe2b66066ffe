//! Configuration, orchestration and persistence for `gradphi` experiments.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod output;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{execute, resume, run, RunOptions};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "GRADPHI_WORKERS";

/// Size the global worker pool from `GRADPHI_WORKERS` if it is set.
pub fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            anyhow::anyhow!("{WORKERS_ENV} must be a positive integer, got {v:?}")
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}
