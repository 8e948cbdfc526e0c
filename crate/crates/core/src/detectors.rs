//! Rolling-window statistics and the standardized, weighted detectors built
//! from them.
//!
//! Every statistic is computed from a sparse view of the window (1-based
//! offsets and values of its nonzero entries). The public window-level
//! functions, [`DetectorEngine::trace`], the null simulation and the online
//! monitor all funnel through the same private kernels, so a window produces
//! bit-identical statistics no matter which path evaluates it.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{ensure_finite, Error, Result};
use crate::series::{IndicatorPanel, MeasureKind, RiskLevels};

/// Weight on the unconditional component when none is given.
pub const DEFAULT_WEIGHT: f64 = 0.5;

/// Null means and variances of the raw window statistics for one
/// `(measure, m, levels)` configuration.
///
/// `*_uc`/`*_iid` refer to the systemic stream (`V`/Gini for binary evidence,
/// KS/Hong for cumulative violations); the `*_var` fields describe the VaR
/// stream, which always uses `V` and the Gini coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullMoments {
    pub measure: MeasureKind,
    pub m: usize,
    pub levels: RiskLevels,
    pub mean_uc: f64,
    pub var_uc: f64,
    pub mean_iid: f64,
    pub var_iid: f64,
    pub mean_uc_var: f64,
    pub var_uc_var: f64,
    pub mean_iid_var: f64,
    pub var_iid_var: f64,
    pub b0: usize,
}

impl NullMoments {
    pub fn ensure_matches(&self, measure: MeasureKind, m: usize, levels: &RiskLevels) -> Result<()> {
        if self.measure != measure || self.m != m || self.levels != *levels {
            return Err(Error::Config(format!(
                "null moments were estimated for ({}, m={}, alpha={}, beta={}) but detectors run ({measure}, m={m}, alpha={}, beta={})",
                self.measure, self.m, self.levels.alpha, self.levels.beta, levels.alpha, levels.beta
            )));
        }
        Ok(())
    }

    fn variances(&self) -> [(&'static str, f64); 4] {
        [
            ("var_uc", self.var_uc),
            ("var_iid", self.var_iid),
            ("var_uc_var", self.var_uc_var),
            ("var_iid_var", self.var_iid_var),
        ]
    }
}

/// Detector values for monitoring times `T = m..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrace {
    /// Time label of each window end.
    pub t: Vec<i64>,
    /// One series per monitored VaR hypothesis.
    pub var_det: Vec<Vec<f64>>,
    /// One series per institution.
    pub sys_det: Vec<Vec<f64>>,
}

impl DetectorTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Largest value of every VaR and systemic series, in that order.
    pub fn suprema(&self) -> (Vec<f64>, Vec<f64>) {
        let sup = |s: &Vec<f64>| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.var_det.iter().map(sup).collect(), self.sys_det.iter().map(sup).collect())
    }
}

// ---------------------------------------------------------------------------
// Window-level operations
// ---------------------------------------------------------------------------

/// `|mean(window) - target_rate|` for a binary window of length `m`.
pub fn window_violation_stat(window: &[f64], m: usize, target_rate: f64) -> Result<f64> {
    if window.len() != m || m == 0 {
        return Err(Error::Input(format!("window has length {}, expected m = {m}", window.len())));
    }
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Input(format!("target rate must lie in (0,1), got {target_rate}")));
    }
    check_binary(window)?;
    let count = window.iter().filter(|&&v| v != 0.0).count();
    Ok(violation_core(count, m, target_rate))
}

/// Gini coefficient of the durations between violations in a binary window.
///
/// Durations are measured from the window start (`t_0 = T - m`), the partial
/// duration after the last violation is dropped, and windows with fewer than
/// two violations score zero.
pub fn gini_from_window(window: &[f64]) -> f64 {
    let offsets: Vec<u32> = nonzero_offsets(window);
    gini_core(&offsets, &mut Vec::new())
}

/// Null CDF of a cumulative violation:
/// `H(x) = [x(1 - alpha) + alpha](1 - beta) + beta` on `[0,1]`.
pub fn null_cdf_h(x: f64, levels: &RiskLevels) -> f64 {
    if x < 0.0 {
        0.0
    } else if x > 1.0 {
        1.0
    } else {
        (x * (1.0 - levels.alpha) + levels.alpha) * (1.0 - levels.beta) + levels.beta
    }
}

/// Kolmogorov-Smirnov distance `sup_{x in [0,1]} |F_m(x) - H(x)|` between the
/// window's empirical CDF and the null CDF of cumulative violations.
///
/// `H` has an atom at zero, so the zero group contributes only the
/// right-continuous value `F_m(0)`; every positive order statistic
/// contributes both one-sided differences.
pub fn ks_from_window(window: &[f64], levels: &RiskLevels) -> Result<f64> {
    check_unit_interval(window)?;
    let mut values: Vec<f64> = window.iter().copied().filter(|&v| v != 0.0).collect();
    Ok(ks_core(window.len(), &mut values, levels))
}

/// Daniell kernel `sin(pi z) / (pi z)` with the removable singularity filled.
pub fn daniell_kernel(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        (PI * z).sin() / (PI * z)
    }
}

/// Lag-`lag` sample autocorrelation with `m`-denominator autocovariances
/// about the window mean; zero for a constant window.
pub fn sample_autocorr(window: &[f64], lag: usize) -> Result<f64> {
    let m = window.len();
    if lag == 0 || lag >= m {
        return Err(Error::Input(format!("lag must lie in 1..={}, got {lag}", m.saturating_sub(1))));
    }
    for &v in window {
        ensure_finite("window entry", v)?;
    }
    // A dense view: every entry is "nonzero" for the purpose of the kernel.
    let (offsets, values) = dense_sparse_view(window);
    let mut scratch = Scratch::default();
    let mut out = 0.0;
    autocorrelations(m, &offsets, &values, &mut scratch, |j, rho| {
        if j == lag {
            out = rho;
        }
    });
    Ok(out)
}

/// Hong's spectral independence statistic
/// `M = m * sum_{j=1}^{m-1} k^2(j/p) rho_j^2` with the Daniell kernel.
pub fn hong_from_window(window: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Input(format!("smoothing parameter must be positive, got {p}")));
    }
    for &v in window {
        ensure_finite("window entry", v)?;
    }
    let m = window.len();
    if m < 2 {
        return Ok(0.0);
    }
    let kernel_sq = kernel_table(m, p);
    let (offsets, values) = dense_sparse_view(window);
    Ok(hong_core(m, &offsets, &values, &kernel_sq, &mut Scratch::default()))
}

/// `(raw - mean) / sqrt(variance)`.
pub fn standardize(raw: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Config(format!("variance must be positive and finite, got {variance}")));
    }
    Ok((raw - mean) / variance.sqrt())
}

/// Smoothing parameter of the Hong statistic, `p_m = ln m`.
pub fn hong_bandwidth(m: usize) -> f64 {
    (m as f64).ln()
}

/// Standardized detectors for every `T = m..n` of `panel`.
pub fn detector_trace(panel: &IndicatorPanel, m: usize, a: f64, moments: &NullMoments) -> Result<DetectorTrace> {
    DetectorEngine::new(panel.measure(), panel.levels(), m, a, moments.clone())?.trace(panel)
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Which pair of raw statistics a stream is summarized by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum StreamKind {
    /// Binary indicators: (`V`, Gini) with the given null rate.
    Binary { rate: f64 },
    /// Cumulative violations: (KS distance to `H`, Hong statistic).
    Cumulative { levels: RiskLevels },
}

/// Reusable buffers so that per-window evaluation does not allocate.
#[derive(Debug, Default, Clone)]
pub(crate) struct Scratch {
    offsets: Vec<u32>,
    durations: Vec<u32>,
    sorted: Vec<f64>,
    lag_products: Vec<f64>,
}

/// Prepared detector configuration: window length, weight, frozen null
/// moments and the kernel table for the Hong statistic.
#[derive(Debug, Clone)]
pub struct DetectorEngine {
    measure: MeasureKind,
    levels: RiskLevels,
    m: usize,
    a: f64,
    moments: NullMoments,
    var_kind: StreamKind,
    sys_kind: StreamKind,
    kernel_sq: Vec<f64>,
    // Standard deviations, computed once so every path divides by the same value.
    sd: [f64; 4],
}

impl DetectorEngine {
    pub fn new(measure: MeasureKind, levels: RiskLevels, m: usize, a: f64, moments: NullMoments) -> Result<Self> {
        levels.validate_for(measure)?;
        if m < 2 {
            return Err(Error::Config(format!("window length must be at least 2, got {m}")));
        }
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("weight a must lie in [0,1], got {a}")));
        }
        moments.ensure_matches(measure, m, &levels)?;
        let mut sd = [0.0; 4];
        for (slot, (name, v)) in sd.iter_mut().zip(moments.variances()) {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("null moment {name} = {v} is not a positive variance")));
            }
            *slot = v.sqrt();
        }
        let (var_kind, sys_kind) = stream_kinds(measure, levels);
        let kernel_sq = kernel_table_for(sys_kind, m);
        Ok(Self { measure, levels, m, a, moments, var_kind, sys_kind, kernel_sq, sd })
    }

    pub fn measure(&self) -> MeasureKind {
        self.measure
    }

    pub fn levels(&self) -> RiskLevels {
        self.levels
    }

    pub fn window(&self) -> usize {
        self.m
    }

    pub fn weight(&self) -> f64 {
        self.a
    }

    pub fn moments(&self) -> &NullMoments {
        &self.moments
    }

    /// Raw `(uc, iid)` statistics of one window given in sparse form.
    pub(crate) fn raw_sparse(
        &self,
        kind: StreamKind,
        offsets: &[u32],
        values: &[f64],
        scratch: &mut Scratch,
    ) -> (f64, f64) {
        raw_statistics(self.m, kind, offsets, values, &self.kernel_sq, scratch)
    }

    fn combine_var(&self, (uc, iid): (f64, f64)) -> f64 {
        let m = &self.moments;
        self.a * ((uc - m.mean_uc_var) / self.sd[2]) + (1.0 - self.a) * ((iid - m.mean_iid_var) / self.sd[3])
    }

    fn combine_sys(&self, (uc, iid): (f64, f64)) -> f64 {
        let m = &self.moments;
        self.a * ((uc - m.mean_uc) / self.sd[0]) + (1.0 - self.a) * ((iid - m.mean_iid) / self.sd[1])
    }

    /// Detector value of the VaR stream on one full window (chronological).
    pub(crate) fn var_detector_window(&self, window: &[f64], scratch: &mut Scratch) -> f64 {
        let (offsets, values) = sparse_of(window);
        self.combine_var(self.raw_sparse(self.var_kind, &offsets, &values, scratch))
    }

    /// Detector value of a systemic stream on one full window (chronological).
    pub(crate) fn sys_detector_window(&self, window: &[f64], scratch: &mut Scratch) -> f64 {
        let (offsets, values) = sparse_of(window);
        self.combine_sys(self.raw_sparse(self.sys_kind, &offsets, &values, scratch))
    }

    /// Detector values for `T = m..n` of a panel.
    pub fn trace(&self, panel: &IndicatorPanel) -> Result<DetectorTrace> {
        if panel.measure() != self.measure || panel.levels() != self.levels {
            return Err(Error::Config(format!(
                "panel ({}, alpha={}, beta={}) does not match detector configuration ({}, alpha={}, beta={})",
                panel.measure(),
                panel.levels().alpha,
                panel.levels().beta,
                self.measure,
                self.levels.alpha,
                self.levels.beta
            )));
        }
        let n = panel.len();
        if n < self.m {
            return Err(Error::Input(format!("panel has {n} records, fewer than the window m = {}", self.m)));
        }
        let t: Vec<i64> = (self.m - 1..n).map(|e| panel.t0() + e as i64).collect();
        let mut scratch = Scratch::default();
        let var_det = panel
            .var_streams()
            .iter()
            .map(|s| self.rolling(s, self.var_kind, &mut scratch, |r| self.combine_var(r)))
            .collect();
        let sys_det = panel
            .evidence()
            .iter()
            .map(|s| self.rolling(s, self.sys_kind, &mut scratch, |r| self.combine_sys(r)))
            .collect();
        Ok(DetectorTrace { t, var_det, sys_det })
    }

    fn rolling(
        &self,
        series: &[f64],
        kind: StreamKind,
        scratch: &mut Scratch,
        combine: impl Fn((f64, f64)) -> f64,
    ) -> Vec<f64> {
        let m = self.m;
        let positions: Vec<usize> = (0..series.len()).filter(|&i| series[i] != 0.0).collect();
        let values: Vec<f64> = positions.iter().map(|&i| series[i]).collect();
        let mut out = Vec::with_capacity(series.len() + 1 - m);
        let (mut lo, mut hi) = (0usize, 0usize);
        let mut offsets = std::mem::take(&mut scratch.offsets);
        for end in m - 1..series.len() {
            let start = end + 1 - m;
            while hi < positions.len() && positions[hi] <= end {
                hi += 1;
            }
            while lo < hi && positions[lo] < start {
                lo += 1;
            }
            offsets.clear();
            offsets.extend(positions[lo..hi].iter().map(|&p| (p - start + 1) as u32));
            let raw = raw_statistics(m, kind, &offsets, &values[lo..hi], &self.kernel_sq, scratch);
            out.push(combine(raw));
        }
        scratch.offsets = offsets;
        out
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by every evaluation path
// ---------------------------------------------------------------------------

/// Statistic pairs for the VaR and the systemic streams of a measure.
pub(crate) fn stream_kinds(measure: MeasureKind, levels: RiskLevels) -> (StreamKind, StreamKind) {
    let var_kind = StreamKind::Binary { rate: levels.var_rate() };
    let sys_kind = if measure.has_binary_evidence() {
        StreamKind::Binary { rate: levels.joint_rate() }
    } else {
        StreamKind::Cumulative { levels }
    };
    (var_kind, sys_kind)
}

pub(crate) fn kernel_table_for(kind: StreamKind, m: usize) -> Vec<f64> {
    match kind {
        StreamKind::Cumulative { .. } => kernel_table(m, hong_bandwidth(m)),
        StreamKind::Binary { .. } => Vec::new(),
    }
}

pub(crate) fn raw_statistics(
    m: usize,
    kind: StreamKind,
    offsets: &[u32],
    values: &[f64],
    kernel_sq: &[f64],
    scratch: &mut Scratch,
) -> (f64, f64) {
    match kind {
        StreamKind::Binary { rate } => {
            let uc = violation_core(offsets.len(), m, rate);
            let mut durations = std::mem::take(&mut scratch.durations);
            let g = gini_core(offsets, &mut durations);
            scratch.durations = durations;
            (uc, g)
        }
        StreamKind::Cumulative { levels } => {
            let mut sorted = std::mem::take(&mut scratch.sorted);
            sorted.clear();
            sorted.extend_from_slice(values);
            let d = ks_core(m, &mut sorted, &levels);
            scratch.sorted = sorted;
            (d, hong_core(m, offsets, values, kernel_sq, scratch))
        }
    }
}

fn violation_core(count: usize, m: usize, rate: f64) -> f64 {
    (count as f64 / m as f64 - rate).abs()
}

/// Gini of durations for sorted 1-based violation offsets.
fn gini_core(offsets: &[u32], durations: &mut Vec<u32>) -> f64 {
    let s = offsets.len();
    if s <= 1 {
        return 0.0;
    }
    durations.clear();
    let mut prev = 0u32;
    for &o in offsets {
        durations.push(o - prev);
        prev = o;
    }
    durations.sort_unstable();
    // sum_{i,j} |d_i - d_j| = 2 sum_i (2i - s - 1) d_(i) over sorted durations.
    let mut pair_sum: i64 = 0;
    let mut total: i64 = 0;
    for (i, &d) in durations.iter().enumerate() {
        pair_sum += (2 * (i as i64 + 1) - s as i64 - 1) * d as i64;
        total += d as i64;
    }
    pair_sum *= 2;
    let s_f = s as f64;
    let mean = total as f64 / s_f;
    (pair_sum as f64 / (s_f * s_f)) / (2.0 * mean)
}

/// KS distance with `values` the nonzero window entries (sorted in place).
fn ks_core(m: usize, values: &mut [f64], levels: &RiskLevels) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let m_f = m as f64;
    let zeros = m - values.len();
    let mut d = (zeros as f64 / m_f - null_cdf_h(0.0, levels)).abs();
    for (i, &x) in values.iter().enumerate() {
        let rank = zeros + i + 1;
        let h = null_cdf_h(x, levels);
        let upper = (rank as f64 / m_f - h).abs();
        let lower = ((rank - 1) as f64 / m_f - h).abs();
        d = d.max(upper).max(lower);
    }
    d
}

/// `k^2(j / p)` for `j = 0..m-1`.
fn kernel_table(m: usize, p: f64) -> Vec<f64> {
    (0..m).map(|j| daniell_kernel(j as f64 / p).powi(2)).collect()
}

/// Calls `visit(j, rho_j)` for `j = 1..m-1`. A constant window yields no calls.
///
/// With `c_t = h_t - mean`, the lag-`j` sum `sum_{t>j} c_t c_{t-j}` expands to
/// `P_j - mean (A_j + B_j) + (m - j) mean^2`, where `P_j` sums products of
/// nonzero entries `j` apart and `A_j`, `B_j` are the sums of the last and
/// first `m - j` entries. This keeps the cost at `O(m + s^2)` for `s`
/// nonzero entries.
fn autocorrelations(
    m: usize,
    offsets: &[u32],
    values: &[f64],
    scratch: &mut Scratch,
    mut visit: impl FnMut(usize, f64),
) {
    let s = values.len();
    if s == 0 {
        return;
    }
    if s == m && values.iter().all(|&v| v == values[0]) {
        return;
    }
    let m_f = m as f64;
    let sum: f64 = values.iter().sum();
    let mean = sum / m_f;
    let gamma0 = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() + (m - s) as f64 * mean * mean;

    let products = &mut scratch.lag_products;
    products.clear();
    products.resize(m, 0.0);
    for i in 0..s {
        for l in i + 1..s {
            products[(offsets[l] - offsets[i]) as usize] += values[i] * values[l];
        }
    }

    let (mut head, mut head_sum) = (0usize, 0.0);
    let (mut tail, mut tail_sum) = (s, 0.0);
    for j in 1..m {
        while head < s && offsets[head] as usize <= j {
            head_sum += values[head];
            head += 1;
        }
        while tail > 0 && offsets[tail - 1] as usize > m - j {
            tail -= 1;
            tail_sum += values[tail];
        }
        let later = sum - head_sum;
        let earlier = sum - tail_sum;
        let gamma_j = products[j] - mean * (later + earlier) + (m - j) as f64 * mean * mean;
        visit(j, gamma_j / gamma0);
    }
}

fn hong_core(m: usize, offsets: &[u32], values: &[f64], kernel_sq: &[f64], scratch: &mut Scratch) -> f64 {
    let mut acc = 0.0;
    autocorrelations(m, offsets, values, scratch, |j, rho| acc += kernel_sq[j] * rho * rho);
    m as f64 * acc
}

fn nonzero_offsets(window: &[f64]) -> Vec<u32> {
    window.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i as u32 + 1).collect()
}

pub(crate) fn sparse_of(window: &[f64]) -> (Vec<u32>, Vec<f64>) {
    let offsets = nonzero_offsets(window);
    let values = offsets.iter().map(|&o| window[o as usize - 1]).collect();
    (offsets, values)
}

fn dense_sparse_view(window: &[f64]) -> (Vec<u32>, Vec<f64>) {
    // Zero entries are dropped: the kernels treat absent offsets as zeros.
    sparse_of(window)
}

fn check_binary(window: &[f64]) -> Result<()> {
    match window.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Input(format!("binary window contains {v}"))),
        None => Ok(()),
    }
}

fn check_unit_interval(window: &[f64]) -> Result<()> {
    match window.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        Some(v) => Err(Error::Input(format!("window entry {v} outside [0,1]"))),
        None => Ok(()),
    }
}
