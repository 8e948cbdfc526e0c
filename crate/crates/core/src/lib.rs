//! Sequential surveillance of systemic risk forecasts.
//!
//! The crate turns forecasts and realized losses into evidence streams
//! ([`series`]), summarizes rolling windows of those streams into
//! standardized detectors ([`detectors`]), calibrates time-uniform critical
//! values by simulating the null law ([`nullsim`]), runs the online
//! monitoring state machine ([`monitor`]) and ships a DCC/CCC-GARCH
//! generator and model-based forecaster for simulation studies ([`dgp`]).

pub mod detectors;
pub mod dgp;
pub mod error;
pub mod monitor;
pub mod nullsim;
pub mod numeric;
pub mod rng;
pub mod series;

pub use detectors::{detector_trace, DetectorEngine, DetectorTrace, NullMoments, DEFAULT_WEIGHT};
pub use error::{Error, Result};

pub use monitor::{
    monitor_finalize, monitor_init, monitor_step, run_batch, AlarmRecord, AlarmSource, MonitorConfig, MonitorReport,
    MonitorState, StepOutcome,
};
pub use nullsim::{CalibrationRequest, CriticalValues, SupSamples};
pub use rng::SeedTree;
pub use series::{
    build_indicator_panel, evidence_at, ForecastPayload, ForecastRecord, IndicatorPanel, MeasureKind,
    ObservationRecord, RiskLevels,
};
