//! Standard-library companion to `scfa-core`: binary tensor files, CSV
//! records and the `scfa` command-line drivers.

pub mod config;
pub mod io;
pub mod record;
pub mod run;

/// Environment variable holding the worker count for the kernels.
pub const WORKERS_VAR: &str = "SCFA_WORKERS";

/// Runs `f` on a pool sized by `SCFA_WORKERS`, or on the global pool when
/// the variable is unset.
pub fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R, config::UsageError> {
    let Ok(raw) = std::env::var(WORKERS_VAR) else {
        return Ok(f());
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| config::UsageError(format!("{WORKERS_VAR} must be a positive integer, got {raw:?}")))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| config::UsageError(format!("cannot start {n} workers: {e}")))?;
    Ok(pool.install(f))
}
