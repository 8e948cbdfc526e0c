//! Evidence streams: exceedance indicators and cumulative violation
//! sequences built from forecasts and realized losses.
//!
//! All losses use the loss-positive convention: a large `x` is a bad day for
//! the reference position. Indicators use strict exceedance, so a loss equal
//! to its forecast is not a violation.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_finite, Error, Result};

/// The systemic risk measure under surveillance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    /// Institution loss quantile conditional on reference distress.
    CoVaR,
    /// Reference loss quantile conditional on institution distress.
    RCoVaR,
    /// Conditional expected shortfall, monitored through cumulative violations.
    CoES,
    /// Marginal expected shortfall, the CoES with `alpha = 0`.
    MES,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 4] = [Self::CoVaR, Self::RCoVaR, Self::CoES, Self::MES];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CoVaR => "covar",
            Self::RCoVaR => "rcovar",
            Self::CoES => "coes",
            Self::MES => "mes",
        }
    }

    /// Binary joint indicators (CoVaR/RCoVaR) versus continuous cumulative
    /// violations (CoES/MES).
    pub fn has_binary_evidence(self) -> bool {
        matches!(self, Self::CoVaR | Self::RCoVaR)
    }

    /// Number of VaR hypotheses monitored alongside `k` systemic ones.
    pub fn var_stream_count(self, k: usize) -> usize {
        match self {
            Self::RCoVaR => k,
            _ => 1,
        }
    }

    /// Index of the VaR stream that gates systemic stream `k`.
    pub fn paired_var_stream(self, k: usize) -> usize {
        match self {
            Self::RCoVaR => k,
            _ => 0,
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "covar" => Ok(Self::CoVaR),
            "rcovar" => Ok(Self::RCoVaR),
            "coes" => Ok(Self::CoES),
            "mes" => Ok(Self::MES),
            other => Err(Error::Input(format!("unknown measure '{other}' (expected covar, rcovar, coes or mes)"))),
        }
    }
}

/// Probability levels: `beta` for the VaR of the conditioning series and
/// `alpha` for the systemic quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskLevels {
    pub alpha: f64,
    pub beta: f64,
}

impl RiskLevels {
    /// Levels for any measure other than MES: both in the open unit interval.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Input(format!("alpha must lie in (0,1), got {alpha}")));
        }
        Self::check_beta(beta)?;
        Ok(Self { alpha, beta })
    }

    /// MES levels; `alpha` is pinned to zero.
    pub fn mes(beta: f64) -> Result<Self> {
        Self::check_beta(beta)?;
        Ok(Self { alpha: 0.0, beta })
    }

    /// Validates `(alpha, beta)` against the measure: MES requires
    /// `alpha = 0`, every other measure requires `alpha > 0`.
    pub fn for_measure(measure: MeasureKind, alpha: f64, beta: f64) -> Result<Self> {
        match measure {
            MeasureKind::MES => {
                if alpha != 0.0 {
                    return Err(Error::Input(format!("MES requires alpha = 0, got {alpha}")));
                }
                Self::mes(beta)
            }
            _ => Self::new(alpha, beta),
        }
    }

    fn check_beta(beta: f64) -> Result<()> {
        if beta > 0.0 && beta < 1.0 {
            Ok(())
        } else {
            Err(Error::Input(format!("beta must lie in (0,1), got {beta}")))
        }
    }

    pub fn validate_for(&self, measure: MeasureKind) -> Result<()> {
        Self::for_measure(measure, self.alpha, self.beta).map(|_| ())
    }

    /// Null violation rate of a VaR indicator, `1 - beta`.
    pub fn var_rate(&self) -> f64 {
        1.0 - self.beta
    }

    /// Null rate of a joint (CoVaR) indicator, `(1 - alpha)(1 - beta)`.
    pub fn joint_rate(&self) -> f64 {
        (1.0 - self.alpha) * (1.0 - self.beta)
    }
}

/// Realized losses at one trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub t: i64,
    /// Loss of the reference position.
    pub x: f64,
    /// Losses of the `K` monitored institutions.
    pub y: Vec<f64>,
}

/// The forecast content issued for day `t` with information up to `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ForecastPayload {
    /// CoVaR mode: one reference VaR and `K` CoVaR thresholds.
    /// RCoVaR mode: `K` institution VaRs and `K` reverse CoVaR thresholds.
    Thresholds { var_hat: Vec<f64>, sys_hat: Vec<f64> },
    /// CoES/MES mode: PIT of the reference loss and `K` conditional tail PITs.
    Pits { pit_x: f64, pit_tail: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub t: i64,
    pub payload: ForecastPayload,
}

/// `1{x > var_hat}`.
pub fn var_indicator(x: f64, var_hat: f64) -> Result<bool> {
    ensure_finite("loss", x)?;
    ensure_finite("VaR forecast", var_hat)?;
    Ok(x > var_hat)
}

/// `1{x > var_hat, y > sys_hat}`. In RCoVaR mode the caller swaps roles and
/// passes `(y_k, x, var_hat_k, rcovar_hat_k)`.
pub fn joint_indicator(x: f64, y: f64, var_hat: f64, sys_hat: f64) -> Result<bool> {
    ensure_finite("conditioning loss", x)?;
    ensure_finite("systemic loss", y)?;
    ensure_finite("VaR forecast", var_hat)?;
    ensure_finite("systemic forecast", sys_hat)?;
    Ok(x > var_hat && y > sys_hat)
}

/// Cumulative CoVaR violation computed from a reference PIT and a
/// conditional tail PIT:
/// `1{pit_x > beta, pit_tail > alpha} (pit_tail - alpha) / (1 - alpha)`.
pub fn cumulative_violation(pit_x: f64, pit_tail: f64, levels: &RiskLevels) -> Result<f64> {
    for (name, p) in [("pit_x", pit_x), ("pit_tail", pit_tail)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Input(format!("{name} must lie in [0,1], got {p}")));
        }
    }
    if pit_x > levels.beta && pit_tail > levels.alpha {
        Ok((pit_tail - levels.alpha) / (1.0 - levels.alpha))
    } else {
        Ok(0.0)
    }
}

/// Joint identification function of (VaR, CoVaR):
/// `(1{x <= v} - beta, 1{x > v} (1{y <= c} - alpha))`.
///
/// Its conditional mean vanishes exactly at the true VaR/CoVaR pair.
pub fn identification_value(v: f64, c: f64, x: f64, y: f64, levels: &RiskLevels) -> Result<(f64, f64)> {
    for (name, value) in [("v", v), ("c", c), ("x", x), ("y", y)] {
        ensure_finite(name, value)?;
    }
    let first = if x <= v { 1.0 } else { 0.0 } - levels.beta;
    let second = if x > v { (if y <= c { 1.0 } else { 0.0 }) - levels.alpha } else { 0.0 };
    Ok((first, second))
}

/// The monitored evidence: VaR indicators plus one systemic stream per
/// institution. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorPanel {
    measure: MeasureKind,
    levels: RiskLevels,
    t0: i64,
    var_streams: Vec<Vec<f64>>,
    evidence: Vec<Vec<f64>>,
}

impl IndicatorPanel {
    /// Assembles a panel from precomputed streams, checking shapes, value
    /// ranges and the nesting of systemic events in their VaR event.
    pub fn from_streams(
        measure: MeasureKind,
        levels: RiskLevels,
        t0: i64,
        var_streams: Vec<Vec<f64>>,
        evidence: Vec<Vec<f64>>,
    ) -> Result<Self> {
        levels.validate_for(measure)?;
        let k = evidence.len();
        if k == 0 {
            return Err(Error::Schema("panel needs at least one systemic stream".into()));
        }
        if var_streams.len() != measure.var_stream_count(k) {
            return Err(Error::Schema(format!(
                "{measure} panel with K={k} needs {} VaR streams, got {}",
                measure.var_stream_count(k),
                var_streams.len()
            )));
        }
        let n = var_streams[0].len();
        if var_streams.iter().chain(evidence.iter()).any(|s| s.len() != n) {
            return Err(Error::Schema("all streams must have the same length".into()));
        }
        for stream in &var_streams {
            if stream.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Schema("VaR indicators must be 0 or 1".into()));
            }
        }
        for (k, stream) in evidence.iter().enumerate() {
            let paired = &var_streams[measure.paired_var_stream(k)];
            for (t, &e) in stream.iter().enumerate() {
                let ok = if measure.has_binary_evidence() { e == 0.0 || e == 1.0 } else { (0.0..=1.0).contains(&e) };
                if !ok {
                    return Err(Error::Schema(format!("evidence value {e} out of range in stream {k} at index {t}")));
                }
                if e != 0.0 && paired[t] != 1.0 {
                    return Err(Error::Schema(format!(
                        "systemic evidence in stream {k} at index {t} without a VaR violation"
                    )));
                }
            }
        }
        Ok(Self { measure, levels, t0, var_streams, evidence })
    }

    pub fn measure(&self) -> MeasureKind {
        self.measure
    }

    pub fn levels(&self) -> RiskLevels {
        self.levels
    }

    /// Time label of the first record.
    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.var_streams[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of monitored institutions `K`.
    pub fn num_series(&self) -> usize {
        self.evidence.len()
    }

    pub fn var_streams(&self) -> &[Vec<f64>] {
        &self.var_streams
    }

    pub fn evidence(&self) -> &[Vec<f64>] {
        &self.evidence
    }

    /// Same data with relabeled time axis.
    pub fn with_t0(mut self, t0: i64) -> Self {
        self.t0 = t0;
        self
    }
}

/// Turns aligned observations and forecasts into the evidence streams of
/// `measure`.
pub fn build_indicator_panel(
    observations: &[ObservationRecord],
    forecasts: &[ForecastRecord],
    measure: MeasureKind,
    levels: RiskLevels,
) -> Result<IndicatorPanel> {
    levels.validate_for(measure)?;
    if observations.is_empty() {
        return Err(Error::Schema("no observations".into()));
    }
    if observations.len() != forecasts.len() {
        return Err(Error::Schema(format!("{} observations but {} forecasts", observations.len(), forecasts.len())));
    }
    let k = observations[0].y.len();
    if k == 0 {
        return Err(Error::Schema("observations carry no institution losses".into()));
    }
    let t0 = observations[0].t;
    let mut var_streams = vec![Vec::with_capacity(observations.len()); measure.var_stream_count(k)];
    let mut evidence = vec![Vec::with_capacity(observations.len()); k];

    for (i, (obs, fc)) in observations.iter().zip(forecasts).enumerate() {
        let expected_t = t0 + i as i64;
        if obs.t != expected_t {
            return Err(Error::Schema(format!(
                "observation time grid broken: expected t={expected_t}, found t={}",
                obs.t
            )));
        }
        if fc.t != obs.t {
            return Err(Error::Schema(format!("forecast t={} misaligned with observation t={}", fc.t, obs.t)));
        }
        if obs.y.len() != k {
            return Err(Error::Schema(format!(
                "observation at t={} has {} institutions, expected {k}",
                obs.t,
                obs.y.len()
            )));
        }
        let (var_row, ev_row) = evidence_at(obs, fc, measure, &levels)?;
        for (stream, v) in var_streams.iter_mut().zip(var_row) {
            stream.push(v);
        }
        for (stream, v) in evidence.iter_mut().zip(ev_row) {
            stream.push(v);
        }
    }
    IndicatorPanel::from_streams(measure, levels, t0, var_streams, evidence)
}

/// VaR and systemic evidence of a single day. The forecast must carry the
/// payload the measure consumes and match the observation's `K`.
pub fn evidence_at(
    obs: &ObservationRecord,
    fc: &ForecastRecord,
    measure: MeasureKind,
    levels: &RiskLevels,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = obs.y.len();
    let levels = *levels;
    let mut var_row = Vec::with_capacity(measure.var_stream_count(k));
    let mut ev_row = Vec::with_capacity(k);
    match (measure, &fc.payload) {
        (MeasureKind::CoVaR, ForecastPayload::Thresholds { var_hat, sys_hat }) => {
            check_len(obs.t, "var_hat", var_hat.len(), 1)?;
            check_len(obs.t, "sys_hat", sys_hat.len(), k)?;
            var_row.push(flag(var_indicator(obs.x, var_hat[0])?));
            for (&y, &c) in obs.y.iter().zip(sys_hat) {
                ev_row.push(flag(joint_indicator(obs.x, y, var_hat[0], c)?));
            }
        }
        (MeasureKind::RCoVaR, ForecastPayload::Thresholds { var_hat, sys_hat }) => {
            check_len(obs.t, "var_hat", var_hat.len(), k)?;
            check_len(obs.t, "sys_hat", sys_hat.len(), k)?;
            for j in 0..k {
                var_row.push(flag(var_indicator(obs.y[j], var_hat[j])?));
                ev_row.push(flag(joint_indicator(obs.y[j], obs.x, var_hat[j], sys_hat[j])?));
            }
        }
        (MeasureKind::CoES | MeasureKind::MES, ForecastPayload::Pits { pit_x, pit_tail }) => {
            check_len(obs.t, "pit_tail", pit_tail.len(), k)?;
            ensure_finite("x", obs.x)?;
            if !(0.0..=1.0).contains(pit_x) {
                return Err(Error::Input(format!("pit_x must lie in [0,1], got {pit_x}")));
            }
            var_row.push(flag(*pit_x > levels.beta));
            for &u in pit_tail {
                ev_row.push(cumulative_violation(*pit_x, u, &levels)?);
            }
        }
        (m, ForecastPayload::Thresholds { .. }) => {
            return Err(Error::Schema(format!(
                "{m} monitoring needs PIT forecasts (pit_x, pit_tail), got thresholds at t={}",
                obs.t
            )))
        }
        (m, ForecastPayload::Pits { .. }) => {
            return Err(Error::Schema(format!("{m} monitoring needs threshold forecasts, got PITs at t={}", obs.t)))
        }
    }
    Ok((var_row, ev_row))
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn check_len(t: i64, name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Schema(format!("{name} at t={t} has {got} entries, expected {want}")))
    }
}
