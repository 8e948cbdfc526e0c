//! Null-law simulation, null moments and calibration of time-uniform
//! critical values.
//!
//! Calibration is a two-stage procedure. Moments of the raw window
//! statistics are estimated first from independent windows and then frozen;
//! the frozen standardization is applied to `B` simulated null paths, whose
//! detector suprema determine the thresholds.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{
    kernel_table_for, raw_statistics, sparse_of, stream_kinds, DetectorEngine, NullMoments, Scratch,
};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::series::{IndicatorPanel, MeasureKind, RiskLevels};

/// Default resolution of the quantile-level grid.
pub const DEFAULT_GRID_STEP: f64 = 5e-4;
/// Default number of windows behind the null moments.
pub const DEFAULT_MOMENT_REPS: usize = 100_000;
/// Smallest accepted number of moment replications.
pub const MIN_MOMENT_REPS: usize = 10_000;

const MOMENT_STAGE: &str = "moments";
const SUP_STAGE: &str = "suprema";

/// Paired suprema of the VaR and systemic detectors over simulated null
/// paths: index `b` of both vectors comes from the same path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupSamples {
    pub sup_var: Vec<f64>,
    pub sup_sys: Vec<f64>,
    pub paired: bool,
}

impl SupSamples {
    pub fn new(sup_var: Vec<f64>, sup_sys: Vec<f64>) -> Result<Self> {
        if sup_var.len() != sup_sys.len() {
            return Err(Error::Input(format!(
                "paired suprema differ in length: {} vs {}",
                sup_var.len(),
                sup_sys.len()
            )));
        }
        if sup_var.is_empty() {
            return Err(Error::Input("no supremum samples".into()));
        }
        if sup_var.iter().chain(&sup_sys).any(|v| v.is_nan()) {
            return Err(Error::Input("supremum samples contain NaN".into()));
        }
        Ok(Self { sup_var, sup_sys, paired: true })
    }

    pub fn len(&self) -> usize {
        self.sup_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sup_var.is_empty()
    }
}

/// Which Bonferroni-type size bound the calibration enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBound {
    /// `P(A) + K P(C) - K P(A and C)`: one VaR hypothesis shared by all
    /// institutions.
    Intersection,
    /// `K P(A or C)`: one VaR hypothesis per institution.
    Union,
}

impl SizeBound {
    pub fn for_measure(measure: MeasureKind) -> Self {
        match measure {
            MeasureKind::RCoVaR => Self::Union,
            _ => Self::Intersection,
        }
    }
}

/// Thresholds selected on the quantile-level grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub v: f64,
    pub c: f64,
    pub nu: f64,
    pub achieved: f64,
}

/// Conventions under which the moments and thresholds were produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub indicator_inequality: String,
    pub gini_few_violations: String,
    pub gini_durations: String,
    pub constant_window_autocorrelation: String,
    pub hong_bandwidth: String,
    pub hong_max_lag: String,
    pub ks_method: String,
    pub threshold_rule: String,
    pub nu_selection: String,
    pub size_bound: SizeBound,
    pub moment_variance: String,
}

impl Conventions {
    pub fn for_measure(measure: MeasureKind) -> Self {
        Self {
            indicator_inequality: "strict exceedance (x > forecast)".into(),
            gini_few_violations: "g = 0 when the window holds at most one violation".into(),
            gini_durations: "first duration from the window start; trailing partial duration dropped".into(),
            constant_window_autocorrelation: "rho = 0 and M = 0 for a constant window".into(),
            hong_bandwidth: "p = ln(m)".into(),
            hong_max_lag: "m - 1".into(),
            ks_method: "two-sided order statistics with the atom of H at zero".into(),
            threshold_rule: "smallest sample q with #{sup >= q} / B <= nu".into(),
            nu_selection: "largest grid nu >= 1/B meeting the size bound".into(),
            size_bound: SizeBound::for_measure(measure),
            moment_variance: "sample variance with n - 1 denominator".into(),
        }
    }
}

/// Calibrated thresholds with everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    pub measure: MeasureKind,
    pub levels: RiskLevels,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub iota: f64,
    pub a: f64,
    pub v: f64,
    pub c: f64,
    pub nu: f64,
    pub achieved: f64,
    pub moments: NullMoments,
    pub b: usize,
    pub grid_step: f64,
    pub seed: u64,
    pub conventions: Conventions,
}

impl CriticalValues {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cv: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("critical values: {e}")))?;
        cv.validate()?;
        Ok(cv)
    }

    pub fn validate(&self) -> Result<()> {
        self.levels.validate_for(self.measure).map_err(|e| Error::Schema(e.to_string()))?;
        self.moments.ensure_matches(self.measure, self.m, &self.levels)?;
        if !(self.v.is_finite() && self.c.is_finite()) {
            return Err(Error::Schema("critical values must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.nu) || self.achieved > self.iota {
            return Err(Error::Schema(format!(
                "inconsistent calibration record: nu = {}, achieved = {} > iota = {}",
                self.nu, self.achieved, self.iota
            )));
        }
        if self.k == 0 || self.m > self.n {
            return Err(Error::Schema(format!("invalid shape K = {}, m = {}, n = {}", self.k, self.m, self.n)));
        }
        Ok(())
    }
}

/// Inputs of a full calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRequest {
    pub measure: MeasureKind,
    pub levels: RiskLevels,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub iota: f64,
    pub a: f64,
    pub b: usize,
    pub b0: usize,
    pub grid_step: f64,
    pub seed: u64,
}

impl CalibrationRequest {
    pub fn new(measure: MeasureKind, levels: RiskLevels, n: usize, m: usize, k: usize, iota: f64) -> Self {
        Self {
            measure,
            levels,
            n,
            m,
            k,
            iota,
            a: crate::detectors::DEFAULT_WEIGHT,
            b: 10_000,
            b0: DEFAULT_MOMENT_REPS,
            grid_step: DEFAULT_GRID_STEP,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Null paths
// ---------------------------------------------------------------------------

/// One null path with a single institution: `(i_var, evidence)`.
pub fn simulate_null_path<R: Rng + ?Sized>(
    measure: MeasureKind,
    levels: &RiskLevels,
    n: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut i_var = Vec::with_capacity(n);
    let mut evidence = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        i_var.push(if u1 > levels.beta { 1.0 } else { 0.0 });
        evidence.push(null_evidence(measure, levels, u1, u2));
    }
    (i_var, evidence)
}

/// Null panel with `k` institutions.
///
/// Institutions share the reference draw under a common VaR hypothesis
/// (CoVaR, CoES, MES) and receive independent pairs under RCoVaR, where each
/// institution carries its own VaR hypothesis.
pub fn simulate_null_panel<R: Rng + ?Sized>(
    measure: MeasureKind,
    levels: RiskLevels,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<IndicatorPanel> {
    if k == 0 {
        return Err(Error::Input("at least one institution is required".into()));
    }
    let n_var = measure.var_stream_count(k);
    let mut var_streams = vec![Vec::with_capacity(n); n_var];
    let mut evidence = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        if n_var == 1 {
            let u1: f64 = rng.random();
            var_streams[0].push(if u1 > levels.beta { 1.0 } else { 0.0 });
            for series in evidence.iter_mut() {
                let u2: f64 = rng.random();
                series.push(null_evidence(measure, &levels, u1, u2));
            }
        } else {
            for (vs, series) in var_streams.iter_mut().zip(evidence.iter_mut()) {
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                vs.push(if u1 > levels.beta { 1.0 } else { 0.0 });
                series.push(null_evidence(measure, &levels, u1, u2));
            }
        }
    }
    IndicatorPanel::from_streams(measure, levels, 1, var_streams, evidence)
}

fn null_evidence(measure: MeasureKind, levels: &RiskLevels, u1: f64, u2: f64) -> f64 {
    if !(u1 > levels.beta && u2 > levels.alpha) {
        0.0
    } else if measure.has_binary_evidence() {
        1.0
    } else {
        (u2 - levels.alpha) / (1.0 - levels.alpha)
    }
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

/// Sample means and variances of the raw window statistics over `b0`
/// independent null windows of length `m`.
pub fn estimate_null_moments(
    measure: MeasureKind,
    levels: RiskLevels,
    m: usize,
    b0: usize,
    seed: u64,
) -> Result<NullMoments> {
    levels.validate_for(measure)?;
    if b0 < MIN_MOMENT_REPS {
        return Err(Error::Config(format!("at least {MIN_MOMENT_REPS} moment replications are required, got {b0}")));
    }
    if m < 2 {
        return Err(Error::Config(format!("window length must be at least 2, got {m}")));
    }
    let tree = SeedTree::new(seed);
    let (var_kind, sys_kind) = stream_kinds(measure, levels);
    let kernel_sq = kernel_table_for(sys_kind, m);
    let raws: Vec<[f64; 4]> = (0..b0)
        .into_par_iter()
        .map_init(Scratch::default, |scratch, b| {
            let mut rng = tree.stream(MOMENT_STAGE, b as u64);
            let (i_var, evidence) = simulate_null_path(measure, &levels, m, &mut rng);
            let (vo, vv) = sparse_of(&i_var);
            let (so, sv) = sparse_of(&evidence);
            let (uc_var, iid_var) = raw_statistics(m, var_kind, &vo, &vv, &kernel_sq, scratch);
            let (uc, iid) = raw_statistics(m, sys_kind, &so, &sv, &kernel_sq, scratch);
            [uc, iid, uc_var, iid_var]
        })
        .collect();
    let mut stats = [(0.0, 0.0); 4];
    for (j, slot) in stats.iter_mut().enumerate() {
        let mean = raws.iter().map(|r| r[j]).sum::<f64>() / b0 as f64;
        let var = raws.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (b0 - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::Config(format!(
                "degenerate null variance for ({measure}, m = {m}); the window is too short for these levels"
            )));
        }
        *slot = (mean, var);
    }
    Ok(NullMoments {
        measure,
        m,
        levels,
        mean_uc: stats[0].0,
        var_uc: stats[0].1,
        mean_iid: stats[1].0,
        var_iid: stats[1].1,
        mean_uc_var: stats[2].0,
        var_uc_var: stats[2].1,
        mean_iid_var: stats[3].0,
        var_iid_var: stats[3].1,
        b0,
    })
}

// ---------------------------------------------------------------------------
// Suprema and thresholds
// ---------------------------------------------------------------------------

/// Paired detector suprema over `T = m..n` on `b` null paths with one
/// institution, evaluated through [`DetectorEngine::trace`].
#[allow(clippy::too_many_arguments)]
pub fn sup_detector_samples(
    measure: MeasureKind,
    levels: RiskLevels,
    n: usize,
    m: usize,
    a: f64,
    moments: &NullMoments,
    b: usize,
    seed: u64,
) -> Result<SupSamples> {
    if n < m {
        return Err(Error::Config(format!("horizon n = {n} is shorter than the window m = {m}")));
    }
    if b == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    let engine = DetectorEngine::new(measure, levels, m, a, moments.clone())?;
    let tree = SeedTree::new(seed);
    let pairs: Vec<(f64, f64)> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = tree.stream(SUP_STAGE, rep as u64);
            let panel = simulate_null_panel(measure, levels, 1, n, &mut rng)?;
            let (var_sup, sys_sup) = engine.trace(&panel)?.suprema();
            Ok((var_sup[0], sys_sup[0]))
        })
        .collect::<Result<_>>()?;
    let (sup_var, sup_sys) = pairs.into_iter().unzip();
    SupSamples::new(sup_var, sup_sys)
}

/// Smallest sample value `q` with `#{samples >= q} / B <= nu`.
///
/// `samples` must be sorted ascending. For `nu < 1/B` no sample qualifies
/// and the next representable value above the maximum is returned.
pub fn threshold_at(samples: &[f64], nu: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("threshold of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&nu) {
        return Err(Error::Input(format!("quantile level must lie in [0,1], got {nu}")));
    }
    let b = samples.len();
    let allowed = ((nu * b as f64) * (1.0 + 1e-12)).floor().min(b as f64) as usize;
    Ok(threshold_for_count(samples, allowed))
}

/// Smallest sample value with at most `allowed` samples at or above it.
fn threshold_for_count(sorted: &[f64], allowed: usize) -> f64 {
    let b = sorted.len();
    let beyond_max = sorted[b - 1].next_up();
    if allowed == 0 {
        return beyond_max;
    }
    let i = b - allowed.min(b);
    let q = sorted[i];
    let first = sorted.partition_point(|&x| x < q);
    if first == i {
        return q;
    }
    // Ties reach below position i: the next distinct value is the answer.
    let next = sorted.partition_point(|&x| x <= q);
    if next == b {
        beyond_max
    } else {
        sorted[next]
    }
}

/// Largest `nu` on the grid whose intersection-form size estimate
/// `P(A) + K P(C) - K P(A and C)` is at most `iota`.
pub fn calibrate_intersection(sups: &SupSamples, k: usize, iota: f64, grid_step: f64) -> Result<Calibration> {
    calibrate_with(sups, k, iota, grid_step, SizeBound::Intersection)
}

/// Largest `nu` on the grid whose union-form size estimate `K P(A or C)` is
/// at most `iota`.
pub fn calibrate_union(sups: &SupSamples, k: usize, iota: f64, grid_step: f64) -> Result<Calibration> {
    calibrate_with(sups, k, iota, grid_step, SizeBound::Union)
}

/// Size estimate of thresholds `(v, c)` on the paired samples.
pub fn size_estimate(sups: &SupSamples, k: usize, v: f64, c: f64, bound: SizeBound) -> f64 {
    let count = exceedance_count(sups, k, v, c, bound);
    count as f64 / sups.len() as f64
}

fn exceedance_count(sups: &SupSamples, k: usize, v: f64, c: f64, bound: SizeBound) -> i64 {
    let (mut a, mut cc, mut both) = (0i64, 0i64, 0i64);
    for (&sv, &ss) in sups.sup_var.iter().zip(&sups.sup_sys) {
        let ea = sv >= v;
        let ec = ss >= c;
        a += ea as i64;
        cc += ec as i64;
        both += (ea && ec) as i64;
    }
    let k = k as i64;
    match bound {
        SizeBound::Intersection => a + k * cc - k * both,
        SizeBound::Union => k * (a + cc - both),
    }
}

pub fn calibrate_with(sups: &SupSamples, k: usize, iota: f64, grid_step: f64, bound: SizeBound) -> Result<Calibration> {
    if !sups.paired || sups.sup_var.len() != sups.sup_sys.len() || sups.is_empty() {
        return Err(Error::Input("calibration needs non-empty paired suprema".into()));
    }
    if k == 0 {
        return Err(Error::Input("at least one institution is required".into()));
    }
    if !(iota > 0.0 && iota < 1.0) {
        return Err(Error::Input(format!("iota must lie in (0,1), got {iota}")));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Input(format!("grid step must lie in (0,1], got {grid_step}")));
    }
    let b = sups.len();
    let grid = (1.0 / grid_step).round().max(1.0) as usize;
    let mut sorted_var = sups.sup_var.clone();
    let mut sorted_sys = sups.sup_sys.clone();
    sorted_var.sort_unstable_by(f64::total_cmp);
    sorted_sys.sort_unstable_by(f64::total_cmp);
    let budget = iota * b as f64;
    // nu = j / grid; levels below 1/B would put both thresholds above every
    // sample and make any iota trivially feasible.
    for j in (0..=grid).rev() {
        if j * b < grid {
            break;
        }
        let allowed = j * b / grid;
        let v = threshold_for_count(&sorted_var, allowed);
        let c = threshold_for_count(&sorted_sys, allowed);
        let count = exceedance_count(sups, k, v, c, bound);
        if count as f64 <= budget {
            return Ok(Calibration { v, c, nu: j as f64 / grid as f64, achieved: count as f64 / b as f64 });
        }
    }
    Err(Error::Calibration(format!(
        "no quantile level satisfies the size bound iota = {iota} with B = {b} replications and K = {k}; increase the number of replications"
    )))
}

/// Full two-stage calibration: moments, suprema, thresholds.
pub fn calibrate(req: &CalibrationRequest) -> Result<CriticalValues> {
    req.levels.validate_for(req.measure)?;
    if req.k == 0 {
        return Err(Error::Config("at least one institution is required".into()));
    }
    let tree = SeedTree::new(req.seed);
    let moments = estimate_null_moments(req.measure, req.levels, req.m, req.b0, tree.child(MOMENT_STAGE).root())?;
    let sups = sup_detector_samples(
        req.measure,
        req.levels,
        req.n,
        req.m,
        req.a,
        &moments,
        req.b,
        tree.child(SUP_STAGE).root(),
    )?;
    let bound = SizeBound::for_measure(req.measure);
    let cal = calibrate_with(&sups, req.k, req.iota, req.grid_step, bound)?;
    Ok(CriticalValues {
        measure: req.measure,
        levels: req.levels,
        n: req.n,
        m: req.m,
        k: req.k,
        iota: req.iota,
        a: req.a,
        v: cal.v,
        c: cal.c,
        nu: cal.nu,
        achieved: cal.achieved,
        moments,
        b: req.b,
        grid_step: req.grid_step,
        seed: req.seed,
        conventions: Conventions::for_measure(req.measure),
    })
}
