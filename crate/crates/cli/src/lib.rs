//! Library side of the `dwinkit` command: configuration, dataset handling,
//! training, evaluation, gradient checks and architecture inspection.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
pub mod train;

pub use config::{ConfigError, RunConfig};

/// Sizes the global rayon pool from `DWINKIT_THREADS` when it is set.
pub fn init_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var("DWINKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("DWINKIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(format!("cannot size thread pool: {e}")))
}
