use thiserror::Error;

/// Errors raised across the surveillance pipeline.
///
/// The variants are coarse on purpose: callers (the CLI in particular) map
/// them onto process exit codes, so each variant names a failure category
/// rather than a specific call site.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A value handed to an operation violates its precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Records or panels have the wrong shape, misaligned time grids or
    /// missing fields.
    #[error("schema error: {0}")]
    Schema(String),

    /// Inconsistent configuration, e.g. critical values calibrated for a
    /// different window length than the monitor uses.
    #[error("configuration error: {0}")]
    Config(String),

    /// Model parameters violate their stationarity or definiteness constraints.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// No critical values satisfy the requested size bound.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Quadrature or root finding failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("monitoring horizon of {horizon} steps exhausted")]
    HorizonExhausted { horizon: usize },

    #[error("no detector values were emitted; at least {m} observations are required")]
    EmptyReport { m: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} must be finite, got {value}")))
    }
}
