//! Online monitoring: rolling windows fed one day at a time, detector values
//! normalized by their critical values, and alarm attribution.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::detectors::{DetectorEngine, DetectorTrace, Scratch};
use crate::error::{Error, Result};
use crate::nullsim::CriticalValues;
use crate::series::{evidence_at, ForecastRecord, IndicatorPanel, MeasureKind, ObservationRecord, RiskLevels};

/// What is being monitored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub measure: MeasureKind,
    pub levels: RiskLevels,
    pub m: usize,
    pub a: f64,
    pub k: usize,
}

impl MonitorConfig {
    /// The configuration a set of critical values was calibrated for.
    pub fn from_cv(cv: &CriticalValues) -> Self {
        Self { measure: cv.measure, levels: cv.levels, m: cv.m, a: cv.a, k: cv.k }
    }
}

/// Detector that raised an alarm. Indices are 1-based, matching the trace
/// column names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum AlarmSource {
    Var(usize),
    Institution(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub t: i64,
    pub source: AlarmSource,
    /// Detector value divided by its critical value.
    pub normalized_value: f64,
    pub first: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub measure: MeasureKind,
    pub m: usize,
    /// Horizon the critical values guarantee.
    pub horizon: usize,
    /// Number of days consumed.
    pub steps: usize,
    /// Normalized detector values for every emitted time.
    pub trace: DetectorTrace,
    pub alarms: Vec<AlarmRecord>,
    pub first_alarm: Option<AlarmRecord>,
}

impl MonitorReport {
    /// Every alarm raised at the first alarm time.
    pub fn first_alarm_group(&self) -> &[AlarmRecord] {
        match self.first_alarm {
            Some(first) => {
                let end = self.alarms.iter().position(|r| r.t != first.t).unwrap_or(self.alarms.len());
                &self.alarms[..end]
            }
            None => &[],
        }
    }
}

/// Result of feeding one day.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// The window is not yet full; `filled` days are buffered.
    Filling { t: i64, filled: usize },
    /// Normalized detector values at `t` and the alarms they raised.
    Emitted { t: i64, var_ratio: Vec<f64>, sys_ratio: Vec<f64>, alarms: Vec<AlarmRecord> },
}

/// Sequential monitor for one portfolio.
#[derive(Debug, Clone)]
pub struct MonitorState {
    config: MonitorConfig,
    cv: CriticalValues,
    engine: DetectorEngine,
    var_buf: Vec<VecDeque<f64>>,
    sys_buf: Vec<VecDeque<f64>>,
    last_t: Option<i64>,
    steps: usize,
    trace: DetectorTrace,
    alarms: Vec<AlarmRecord>,
    first: Option<AlarmRecord>,
    scratch: Scratch,
    window: Vec<f64>,
}

/// Checks `cv` against `config` and returns an empty monitor.
pub fn monitor_init(config: MonitorConfig, cv: CriticalValues) -> Result<MonitorState> {
    check_compatible(&config, &cv)?;
    let engine = DetectorEngine::new(config.measure, config.levels, config.m, config.a, cv.moments.clone())?;
    let n_var = config.measure.var_stream_count(config.k);
    Ok(MonitorState {
        engine,
        var_buf: vec![VecDeque::with_capacity(config.m); n_var],
        sys_buf: vec![VecDeque::with_capacity(config.m); config.k],
        last_t: None,
        steps: 0,
        trace: DetectorTrace { t: Vec::new(), var_det: vec![Vec::new(); n_var], sys_det: vec![Vec::new(); config.k] },
        alarms: Vec::new(),
        first: None,
        scratch: Scratch::default(),
        window: Vec::with_capacity(config.m),
        config,
        cv,
    })
}

fn check_compatible(config: &MonitorConfig, cv: &CriticalValues) -> Result<()> {
    let mut problems = Vec::new();
    if cv.measure != config.measure {
        problems.push(format!("measure {} vs {}", cv.measure, config.measure));
    }
    if cv.levels != config.levels {
        problems.push(format!(
            "levels (alpha={}, beta={}) vs (alpha={}, beta={})",
            cv.levels.alpha, cv.levels.beta, config.levels.alpha, config.levels.beta
        ));
    }
    if cv.m != config.m {
        problems.push(format!("window m={} vs {}", cv.m, config.m));
    }
    if cv.k != config.k {
        problems.push(format!("K={} vs {}", cv.k, config.k));
    }
    if cv.a != config.a {
        problems.push(format!("weight a={} vs {}", cv.a, config.a));
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!("critical values do not match the monitor: {}", problems.join("; "))));
    }
    if !(cv.v > 0.0 && cv.c > 0.0) {
        return Err(Error::Config(format!(
            "thresholds must be positive to normalize detector values, got v={}, c={}",
            cv.v, cv.c
        )));
    }
    Ok(())
}

/// Feeds the forecast issued for day `t` and the realized losses of day `t`.
pub fn monitor_step(
    state: &mut MonitorState,
    forecast: &ForecastRecord,
    observation: &ObservationRecord,
) -> Result<StepOutcome> {
    state.step(forecast, observation)
}

/// Closes the run and returns the report.
pub fn monitor_finalize(state: MonitorState) -> Result<MonitorReport> {
    state.finalize()
}

impl MonitorState {
    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn critical_values(&self) -> &CriticalValues {
        &self.cv
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alarms(&self) -> &[AlarmRecord] {
        &self.alarms
    }

    pub fn first_alarm(&self) -> Option<&AlarmRecord> {
        self.first.as_ref()
    }

    pub fn step(&mut self, forecast: &ForecastRecord, observation: &ObservationRecord) -> Result<StepOutcome> {
        let t = observation.t;
        if forecast.t != t {
            return Err(Error::Input(format!("forecast t={} does not match observation t={t}", forecast.t)));
        }
        if let Some(prev) = self.last_t {
            if t <= prev {
                return Err(Error::Input(format!("time must increase strictly: t={t} after t={prev}")));
            }
        }
        if observation.y.len() != self.config.k {
            return Err(Error::Input(format!(
                "observation at t={t} has {} institutions, monitor expects {}",
                observation.y.len(),
                self.config.k
            )));
        }
        if self.steps >= self.cv.n {
            return Err(Error::HorizonExhausted { horizon: self.cv.n });
        }
        let (var_row, sys_row) =
            evidence_at(observation, forecast, self.config.measure, &self.config.levels).map_err(|e| match e {
                Error::Schema(msg) => Error::Input(msg),
                other => other,
            })?;
        let m = self.config.m;
        for (buf, v) in self.var_buf.iter_mut().chain(self.sys_buf.iter_mut()).zip(var_row.into_iter().chain(sys_row)) {
            if buf.len() == m {
                buf.pop_front();
            }
            buf.push_back(v);
        }
        self.last_t = Some(t);
        self.steps += 1;
        if self.steps < m {
            return Ok(StepOutcome::Filling { t, filled: self.steps });
        }

        let mut var_ratio = Vec::with_capacity(self.var_buf.len());
        for buf in &self.var_buf {
            self.window.clear();
            self.window.extend(buf.iter().copied());
            var_ratio.push(self.engine.var_detector_window(&self.window, &mut self.scratch) / self.cv.v);
        }
        let mut sys_ratio = Vec::with_capacity(self.sys_buf.len());
        for buf in &self.sys_buf {
            self.window.clear();
            self.window.extend(buf.iter().copied());
            sys_ratio.push(self.engine.sys_detector_window(&self.window, &mut self.scratch) / self.cv.c);
        }
        self.trace.t.push(t);
        for (s, &r) in self.trace.var_det.iter_mut().zip(&var_ratio) {
            s.push(r);
        }
        for (s, &r) in self.trace.sys_det.iter_mut().zip(&sys_ratio) {
            s.push(r);
        }
        let alarms = alarms_at(t, &var_ratio, &sys_ratio, self.first.is_none());
        if self.first.is_none() {
            self.first = alarms.iter().find(|r| r.first).copied();
        }
        self.alarms.extend_from_slice(&alarms);
        Ok(StepOutcome::Emitted { t, var_ratio, sys_ratio, alarms })
    }

    pub fn finalize(self) -> Result<MonitorReport> {
        if self.trace.is_empty() {
            return Err(Error::EmptyReport { m: self.config.m });
        }
        Ok(MonitorReport {
            measure: self.config.measure,
            m: self.config.m,
            horizon: self.cv.n,
            steps: self.steps,
            trace: self.trace,
            alarms: self.alarms,
            first_alarm: self.first,
        })
    }
}

/// Alarms raised by one time point. When `flag_first` is set, the crossing
/// with the largest normalized value is flagged; exact ties go to the lowest
/// stream index, VaR streams first.
fn alarms_at(t: i64, var_ratio: &[f64], sys_ratio: &[f64], flag_first: bool) -> Vec<AlarmRecord> {
    let mut out: Vec<AlarmRecord> = var_ratio
        .iter()
        .enumerate()
        .map(|(i, &r)| (AlarmSource::Var(i + 1), r))
        .chain(sys_ratio.iter().enumerate().map(|(i, &r)| (AlarmSource::Institution(i + 1), r)))
        .filter(|&(_, r)| r >= 1.0)
        .map(|(source, normalized_value)| AlarmRecord { t, source, normalized_value, first: false })
        .collect();
    if flag_first && !out.is_empty() {
        let mut best = 0;
        for (i, rec) in out.iter().enumerate() {
            if rec.normalized_value > out[best].normalized_value {
                best = i;
            }
        }
        out[best].first = true;
    }
    out
}

/// Monitors a whole panel at once through [`DetectorEngine::trace`], with
/// the same normalization and alarm rules as the online monitor.
pub fn run_batch(panel: &IndicatorPanel, cv: &CriticalValues) -> Result<MonitorReport> {
    let config = MonitorConfig::from_cv(cv);
    check_compatible(&config, cv)?;
    if panel.num_series() != cv.k {
        return Err(Error::Config(format!(
            "panel has K={} institutions, critical values K={}",
            panel.num_series(),
            cv.k
        )));
    }
    if panel.len() > cv.n {
        return Err(Error::HorizonExhausted { horizon: cv.n });
    }
    if panel.len() < cv.m {
        return Err(Error::EmptyReport { m: cv.m });
    }
    let engine = DetectorEngine::new(cv.measure, cv.levels, cv.m, cv.a, cv.moments.clone())?;
    let mut trace = engine.trace(panel)?;
    for s in &mut trace.var_det {
        s.iter_mut().for_each(|v| *v /= cv.v);
    }
    for s in &mut trace.sys_det {
        s.iter_mut().for_each(|v| *v /= cv.c);
    }
    let mut alarms = Vec::new();
    let mut first = None;
    let mut var_ratio = vec![0.0; trace.var_det.len()];
    let mut sys_ratio = vec![0.0; trace.sys_det.len()];
    for (i, &t) in trace.t.iter().enumerate() {
        for (r, s) in var_ratio.iter_mut().zip(&trace.var_det) {
            *r = s[i];
        }
        for (r, s) in sys_ratio.iter_mut().zip(&trace.sys_det) {
            *r = s[i];
        }
        let step = alarms_at(t, &var_ratio, &sys_ratio, first.is_none());
        if first.is_none() {
            first = step.iter().find(|r| r.first).copied();
        }
        alarms.extend(step);
    }
    Ok(MonitorReport {
        measure: cv.measure,
        m: cv.m,
        horizon: cv.n,
        steps: panel.len(),
        trace,
        alarms,
        first_alarm: first,
    })
}
