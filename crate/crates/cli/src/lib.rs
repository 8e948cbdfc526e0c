//! Command-line front end: file formats, subcommands and the simulation
//! study harness.

pub mod commands;
pub mod io;
pub mod study;

use risk_sentinel_core::Error;

pub use commands::{run, Cli};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "RISK_SENTINEL_THREADS";

/// Process exit code for a failed command: 2 for schema, input,
/// configuration and parameter problems, 3 for infeasible calibrations,
/// 4 for numerical failures and 1 for I/O and anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Calibration(_) => 3,
                Error::Numeric(_) => 4,
                Error::Input(_)
                | Error::Schema(_)
                | Error::Config(_)
                | Error::Parameter(_)
                | Error::HorizonExhausted { .. }
                | Error::EmptyReport { .. } => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { 1 } else { 2 };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    1
}

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")).into()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    Ok(())
}
