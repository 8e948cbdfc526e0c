//! CSV panels, traces and JSON alarm logs.
//!
//! Every numeric field is written with Rust's shortest round-trip float
//! formatting, so reading a file back and writing it again reproduces the
//! same bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use risk_sentinel_core::{
    AlarmRecord, DetectorTrace, Error, ForecastPayload, ForecastRecord, MeasureKind, MonitorReport, ObservationRecord,
};
use serde::{Deserialize, Serialize};

fn schema(msg: impl Into<String>) -> anyhow::Error {
    Error::Schema(msg.into()).into()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

/// Reads a headed CSV table into its header and rows.
fn read_table(reader: impl Read, what: &str) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| schema(format!("{what}: unreadable header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(schema(format!("{what}: missing header")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(format!("{what}: {e}")))?;
        if rec.len() != header.len() {
            return Err(schema(format!("{what}: row has {} fields, header has {}", rec.len(), header.len())));
        }
        rows.push(rec);
    }
    Ok((header, rows))
}

fn parse_t(rec: &csv::StringRecord, what: &str) -> Result<i64> {
    rec[0].parse().map_err(|_| schema(format!("{what}: time index {:?} is not an integer", &rec[0])))
}

fn parse_f64(field: &str, column: &str, t: i64, what: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| schema(format!("{what}: {column} at t={t} is not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(schema(format!("{what}: {column} at t={t} is not finite")));
    }
    Ok(v)
}

fn numbered(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Returns
// ---------------------------------------------------------------------------

/// Header `t,x,y1..yK`.
pub fn returns_header(k: usize) -> Vec<String> {
    let mut h = vec!["t".to_owned(), "x".to_owned()];
    h.extend(numbered("y", k));
    h
}

pub fn parse_returns(reader: impl Read) -> Result<Vec<ObservationRecord>> {
    let what = "returns";
    let (header, rows) = read_table(reader, what)?;
    if header.len() < 3 {
        return Err(schema("returns: expected columns t,x,y1..yK with K >= 1"));
    }
    let expected = returns_header(header.len() - 2);
    if header != expected {
        return Err(schema(format!("returns: header {header:?}, expected {expected:?}")));
    }
    rows.iter()
        .map(|rec| {
            let t = parse_t(rec, what)?;
            let x = parse_f64(&rec[1], "x", t, what)?;
            let y = (2..rec.len()).map(|j| parse_f64(&rec[j], &header[j], t, what)).collect::<Result<_>>()?;
            Ok(ObservationRecord { t, x, y })
        })
        .collect()
}

pub fn read_returns(path: &Path) -> Result<Vec<ObservationRecord>> {
    parse_returns(open(path)?).with_context(|| format!("reading {}", path.display()))
}

pub fn write_returns(path: &Path, rows: &[ObservationRecord]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.y.len());
    write_table(
        path,
        &returns_header(k),
        rows.iter().map(|r| {
            let mut out = vec![r.t.to_string(), r.x.to_string()];
            out.extend(r.y.iter().map(f64::to_string));
            out
        }),
    )
}

// ---------------------------------------------------------------------------
// Forecasts
// ---------------------------------------------------------------------------

/// Column layout of a forecast file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastLayout {
    /// `t,var_hat,sys_hat_1..K`
    Covar,
    /// `t,var_hat_1..K,sys_hat_1..K`
    Rcovar,
    /// `t,pit_x,pit_tail_1..K`
    Pit,
}

impl ForecastLayout {
    pub fn for_measure(measure: MeasureKind) -> Self {
        match measure {
            MeasureKind::CoVaR => Self::Covar,
            MeasureKind::RCoVaR => Self::Rcovar,
            MeasureKind::CoES | MeasureKind::MES => Self::Pit,
        }
    }

    pub fn header(self, k: usize) -> Vec<String> {
        let mut h = vec!["t".to_owned()];
        match self {
            Self::Covar => h.push("var_hat".to_owned()),
            Self::Rcovar => h.extend(numbered("var_hat_", k)),
            Self::Pit => h.push("pit_x".to_owned()),
        }
        h.extend(numbered(if self == Self::Pit { "pit_tail_" } else { "sys_hat_" }, k));
        h
    }

    fn detect(header: &[String]) -> Result<(Self, usize)> {
        let n = header.len();
        let layout = match header.get(1).map(String::as_str) {
            Some("pit_x") => Self::Pit,
            Some("var_hat") => Self::Covar,
            Some("var_hat_1") => Self::Rcovar,
            _ => return Err(schema(format!("forecasts: unrecognized header {header:?}"))),
        };
        let k = match layout {
            Self::Rcovar if n >= 3 && (n - 1).is_multiple_of(2) => (n - 1) / 2,
            Self::Covar | Self::Pit if n >= 3 => n - 2,
            _ => return Err(schema(format!("forecasts: header {header:?} has the wrong number of columns"))),
        };
        let expected = layout.header(k);
        if header != expected {
            return Err(schema(format!("forecasts: header {header:?}, expected {expected:?}")));
        }
        Ok((layout, k))
    }
}

pub fn parse_forecasts(reader: impl Read) -> Result<(ForecastLayout, Vec<ForecastRecord>)> {
    let what = "forecasts";
    let (header, rows) = read_table(reader, what)?;
    let (layout, k) = ForecastLayout::detect(&header)?;
    let records = rows
        .iter()
        .map(|rec| {
            let t = parse_t(rec, what)?;
            let vals = (1..rec.len()).map(|j| parse_f64(&rec[j], &header[j], t, what)).collect::<Result<Vec<f64>>>()?;
            let payload = match layout {
                ForecastLayout::Covar => {
                    ForecastPayload::Thresholds { var_hat: vec![vals[0]], sys_hat: vals[1..].to_vec() }
                }
                ForecastLayout::Rcovar => {
                    ForecastPayload::Thresholds { var_hat: vals[..k].to_vec(), sys_hat: vals[k..].to_vec() }
                }
                ForecastLayout::Pit => ForecastPayload::Pits { pit_x: vals[0], pit_tail: vals[1..].to_vec() },
            };
            Ok(ForecastRecord { t, payload })
        })
        .collect::<Result<_>>()?;
    Ok((layout, records))
}

pub fn read_forecasts(path: &Path) -> Result<(ForecastLayout, Vec<ForecastRecord>)> {
    parse_forecasts(open(path)?).with_context(|| format!("reading {}", path.display()))
}

pub fn write_forecasts(path: &Path, layout: ForecastLayout, rows: &[ForecastRecord]) -> Result<()> {
    let k = match rows.first().map(|r| &r.payload) {
        Some(ForecastPayload::Thresholds { sys_hat, .. }) => sys_hat.len(),
        Some(ForecastPayload::Pits { pit_tail, .. }) => pit_tail.len(),
        None => 0,
    };
    let mut lines = Vec::with_capacity(rows.len());
    for r in rows {
        let mut out = vec![r.t.to_string()];
        match (&r.payload, layout) {
            (ForecastPayload::Thresholds { var_hat, sys_hat }, ForecastLayout::Covar | ForecastLayout::Rcovar) => {
                out.extend(var_hat.iter().chain(sys_hat).map(f64::to_string));
            }
            (ForecastPayload::Pits { pit_x, pit_tail }, ForecastLayout::Pit) => {
                out.push(pit_x.to_string());
                out.extend(pit_tail.iter().map(f64::to_string));
            }
            _ => return Err(schema(format!("forecast at t={} does not fit the {layout:?} layout", r.t))),
        }
        lines.push(out);
    }
    write_table(path, &layout.header(k), lines.into_iter())
}

// ---------------------------------------------------------------------------
// Streaming records
// ---------------------------------------------------------------------------

/// One line of a newline-delimited JSON stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub observation: ObservationRecord,
    pub forecast: ForecastRecord,
}

/// Iterates over the non-blank lines of a JSON-lines stream.
pub fn stream_records(reader: impl Read) -> impl Iterator<Item = Result<StreamRecord>> {
    BufReader::new(reader)
        .lines()
        .enumerate()
        .filter(|(_, line)| line.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.context("reading stream")?;
            serde_json::from_str(&line).map_err(|e| schema(format!("stream line {}: {e}", i + 1)))
        })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Header `T,det_var[_k],det_sys_1..K`.
pub fn trace_header(measure: MeasureKind, trace: &DetectorTrace) -> Vec<String> {
    let mut h = vec!["T".to_owned()];
    if measure == MeasureKind::RCoVaR {
        h.extend(numbered("det_var_", trace.var_det.len()));
    } else {
        h.push("det_var".to_owned());
    }
    h.extend(numbered("det_sys_", trace.sys_det.len()));
    h
}

pub fn write_trace(path: &Path, measure: MeasureKind, trace: &DetectorTrace) -> Result<()> {
    write_table(
        path,
        &trace_header(measure, trace),
        trace.t.iter().enumerate().map(|(i, t)| {
            let mut out = vec![t.to_string()];
            out.extend(trace.var_det.iter().chain(&trace.sys_det).map(|s| s[i].to_string()));
            out
        }),
    )
}

pub fn parse_trace(reader: impl Read) -> Result<DetectorTrace> {
    let what = "trace";
    let (header, rows) = read_table(reader, what)?;
    if header.first().map(String::as_str) != Some("T") || header.len() < 3 {
        return Err(schema(format!("trace: unrecognized header {header:?}")));
    }
    let n_var = header.iter().filter(|h| h.starts_with("det_var")).count();
    let n_sys = header.len() - 1 - n_var;
    let mut trace = DetectorTrace { t: Vec::new(), var_det: vec![Vec::new(); n_var], sys_det: vec![Vec::new(); n_sys] };
    // A single VaR column is shared by all institutions; one column per
    // institution is the reverse CoVaR layout.
    let layout = if header[1] == "det_var" { MeasureKind::CoVaR } else { MeasureKind::RCoVaR };
    if trace_header(layout, &trace) != header {
        return Err(schema(format!("trace: unrecognized header {header:?}")));
    }
    for rec in &rows {
        let t = parse_t(rec, what)?;
        trace.t.push(t);
        for (j, s) in trace.var_det.iter_mut().chain(trace.sys_det.iter_mut()).enumerate() {
            s.push(parse_f64(&rec[j + 1], &header[j + 1], t, what)?);
        }
    }
    Ok(trace)
}

pub fn read_trace(path: &Path) -> Result<DetectorTrace> {
    parse_trace(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// Alarm log written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmLog {
    pub measure: MeasureKind,
    pub m: usize,
    pub horizon: usize,
    pub steps: usize,
    pub first_alarm: Option<AlarmRecord>,
    /// Every crossing at the first alarm time.
    pub first_alarm_group: Vec<AlarmRecord>,
    pub alarms: Vec<AlarmRecord>,
}

impl AlarmLog {
    pub fn from_report(report: &MonitorReport) -> Self {
        Self {
            measure: report.measure,
            m: report.m,
            horizon: report.horizon,
            steps: report.steps,
            first_alarm: report.first_alarm,
            first_alarm_group: report.first_alarm_group().to_vec(),
            alarms: report.alarms.clone(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    create(path)?.write_all(text.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forecast_layouts_round_trip_through_headers() {
        for (layout, k) in [(ForecastLayout::Covar, 3), (ForecastLayout::Rcovar, 2), (ForecastLayout::Pit, 1)] {
            assert_eq!(ForecastLayout::detect(&layout.header(k)).unwrap(), (layout, k));
        }
        let bad: Vec<String> = ["t", "var_hat_1", "sys_hat_1", "sys_hat_2"].iter().map(|s| s.to_string()).collect();
        assert!(ForecastLayout::detect(&bad).is_err());
    }

    #[test]
    fn malformed_returns_are_schema_errors() {
        for text in [
            "t,x\n1,0.5\n",
            "t,x,y2\n1,0.5,0.1\n",
            "t,x,y1\n1,abc,0.1\n",
            "t,x,y1\n1.5,0,0\n",
            "t,x,y1\n1,0\n",
            "t,x,y1\n1,NaN,0\n",
        ] {
            let err = parse_returns(text.as_bytes()).unwrap_err();
            assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Schema(_))), "{text:?}: {err}");
        }
    }
}
