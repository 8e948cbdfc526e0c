//! Simulation studies: simulate, forecast, calibrate, monitor and
//! aggregate first-rejection rates.

use std::collections::HashMap;
use std::fmt;

use anyhow::Result;
use rayon::prelude::*;
use risk_sentinel_core::dgp::{
    forecast_with, simulate_dcc, BreakSpec, CovarTable, DccParams, Forecaster, TailPolicy, DEFAULT_BURNIN,
};
use risk_sentinel_core::nullsim::{calibrate, DEFAULT_GRID_STEP, DEFAULT_MOMENT_REPS};
use risk_sentinel_core::{
    build_indicator_panel, run_batch, AlarmRecord, AlarmSource, CalibrationRequest, CriticalValues, MeasureKind,
    RiskLevels, SeedTree,
};
use serde::{Deserialize, Serialize};

/// Calibration paths for a full-scale study.
pub const FULL_CALIBRATION_REPS: usize = 10_000;
/// Evaluation paths per cell for a full-scale study.
pub const FULL_EVALUATION_REPS: usize = 5_000;
const MIN_EVALUATION_REPS: usize = 100;
const MIN_CALIBRATION_REPS: usize = 1_000;

/// Break points of the power curves.
pub const BREAK_GRID: [usize; 21] =
    [0, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500, 550, 600, 650, 700, 750, 800, 850, 900, 950, 1000];
/// Post-break persistences of the magnitude curves.
pub const BETA_POST_GRID: [f64; 7] = [0.7, 0.75, 0.8, 0.85, 0.87, 0.89, 0.899];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// First rejection rates under the null, all measures.
    SizeTable,
    /// Power against the break point.
    PowerBreak,
    /// Power against the post-break persistence at `t* = 0`.
    PowerMagnitude,
    /// Per-detector first-alarm rates along the break grid, `K = 5`.
    FirstAlarm,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SizeTable => "size_table",
            Self::PowerBreak => "power_break",
            Self::PowerMagnitude => "power_magnitude",
            Self::FirstAlarm => "first_alarm",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One point of a study grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCell {
    pub measure: MeasureKind,
    pub levels: RiskLevels,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub iota: f64,
    /// Break time; `t_star = n` means no break.
    pub t_star: usize,
    pub beta_post: f64,
    /// Evaluation paths.
    pub reps: usize,
    /// Calibration paths.
    pub b: usize,
    /// Paths for the null moments.
    pub b0: usize,
}

impl StudyCell {
    /// A null cell with the simulation design's defaults.
    pub fn null(measure: MeasureKind, levels: RiskLevels, k: usize) -> Self {
        Self {
            measure,
            levels,
            k,
            n: 1000,
            m: 250,
            iota: 0.1,
            t_star: 1000,
            beta_post: 0.85,
            reps: FULL_EVALUATION_REPS,
            b: FULL_CALIBRATION_REPS,
            b0: DEFAULT_MOMENT_REPS,
        }
    }

    pub fn has_break(&self) -> bool {
        self.t_star < self.n
    }

    fn calibration_key(&self) -> String {
        format!(
            "calibration/{}/{}/{}/{}/{}/{}/{}/{}/{}",
            self.measure, self.k, self.levels.alpha, self.levels.beta, self.n, self.m, self.iota, self.b, self.b0
        )
    }

    fn path_key(&self) -> String {
        format!(
            "paths/{}/{}/{}/{}/{}/{}/{}",
            self.measure, self.k, self.levels.alpha, self.levels.beta, self.n, self.t_star, self.beta_post
        )
    }

    fn request(&self, seed: u64) -> CalibrationRequest {
        let mut req = CalibrationRequest::new(self.measure, self.levels, self.n, self.m, self.k, self.iota);
        req.b = self.b;
        req.b0 = self.b0;
        req.grid_step = DEFAULT_GRID_STEP;
        req.seed = seed;
        req
    }
}

/// Aggregated outcome of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: StudyCell,
    /// Share of paths with at least one alarm.
    pub joint_rate: f64,
    /// Share of paths whose first alarm came from each VaR stream.
    pub first_var: Vec<f64>,
    /// Share of paths whose first alarm came from each institution.
    pub first_sys: Vec<f64>,
    pub cv: CriticalValues,
}

impl CellResult {
    pub fn var_first_total(&self) -> f64 {
        self.share_total(&self.first_var)
    }

    pub fn sys_first_total(&self) -> f64 {
        self.share_total(&self.first_sys)
    }

    /// Sums shares through their counts so the total prints cleanly.
    fn share_total(&self, shares: &[f64]) -> f64 {
        let reps = self.cell.reps as f64;
        shares.iter().map(|s| (s * reps).round()).sum::<f64>() / reps
    }
}

/// Runs cells under one root seed, reusing critical values and CoVaR
/// tables across cells that share them.
pub struct StudyRunner {
    tree: SeedTree,
    cvs: HashMap<String, CriticalValues>,
    tables: HashMap<String, CovarTable>,
}

impl StudyRunner {
    pub fn new(seed: u64) -> Self {
        Self { tree: SeedTree::new(seed), cvs: HashMap::new(), tables: HashMap::new() }
    }

    pub fn critical_values(&mut self, cell: &StudyCell) -> Result<CriticalValues> {
        let key = cell.calibration_key();
        if let Some(cv) = self.cvs.get(&key) {
            return Ok(cv.clone());
        }
        let cv = calibrate(&cell.request(self.tree.child(&key).root()))?;
        self.cvs.insert(key, cv.clone());
        Ok(cv)
    }

    fn forecaster(&mut self, cell: &StudyCell, nu: f64) -> Result<Forecaster> {
        let f = Forecaster::new(cell.measure, cell.levels, nu)?;
        Ok(match cell.measure {
            MeasureKind::CoVaR | MeasureKind::RCoVaR => {
                let key = format!("{nu}/{}/{}", cell.levels.alpha, cell.levels.beta);
                let table = match self.tables.get(&key) {
                    Some(t) => t.clone(),
                    None => {
                        let t = CovarTable::build(nu, cell.levels)?;
                        self.tables.insert(key, t.clone());
                        t
                    }
                };
                f.with_table(table)?
            }
            MeasureKind::CoES | MeasureKind::MES => f.with_tail_policy(TailPolicy::WhenExceeded),
        })
    }

    /// First alarm of every evaluation path, in replicate order.
    pub fn first_alarms(&mut self, cell: &StudyCell, cv: &CriticalValues) -> Result<Vec<Option<AlarmRecord>>> {
        let params = DccParams::baseline(cell.k);
        let forecaster = self.forecaster(cell, params.nu)?;
        let brk = cell.has_break().then_some(BreakSpec { t_star: cell.t_star, beta_post: cell.beta_post });
        let paths = self.tree.child(&cell.path_key());
        (0..cell.reps as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = paths.stream("path", r);
                let sim = simulate_dcc(&params, brk.as_ref(), cell.n, DEFAULT_BURNIN, &mut rng)?;
                let fc = forecast_with(&forecaster, &params, &sim.observations, &sim.presample)?;
                let panel = build_indicator_panel(&sim.observations, &fc, cell.measure, cell.levels)?;
                Ok(run_batch(&panel, cv)?.first_alarm)
            })
            .collect()
    }

    pub fn run_cell(&mut self, cell: &StudyCell) -> Result<CellResult> {
        let cv = self.critical_values(cell)?;
        let firsts = self.first_alarms(cell, &cv)?;
        let reps = cell.reps as f64;
        let mut first_var = vec![0.0; cell.measure.var_stream_count(cell.k)];
        let mut first_sys = vec![0.0; cell.k];
        let mut joint = 0usize;
        for first in firsts.iter().flatten() {
            joint += 1;
            match first.source {
                AlarmSource::Var(j) => first_var[j - 1] += 1.0,
                AlarmSource::Institution(j) => first_sys[j - 1] += 1.0,
            }
        }
        first_var.iter_mut().chain(first_sys.iter_mut()).for_each(|v| *v /= reps);
        Ok(CellResult { cell: cell.clone(), joint_rate: joint as f64 / reps, first_var, first_sys, cv })
    }
}

/// Optional restrictions of a preset grid.
#[derive(Debug, Clone, Default)]
pub struct GridFilter {
    pub measures: Vec<MeasureKind>,
    pub ks: Vec<usize>,
    pub levels: Vec<f64>,
}

impl GridFilter {
    fn keep(&self, measure: MeasureKind, k: usize, level: f64) -> bool {
        (self.measures.is_empty() || self.measures.contains(&measure))
            && (self.ks.is_empty() || self.ks.contains(&k))
            && (self.levels.is_empty() || self.levels.contains(&level))
    }
}

fn scaled(full: usize, scale: f64, floor: usize) -> usize {
    ((full as f64 * scale).round() as usize).max(floor)
}

fn levels_at(measure: MeasureKind, level: f64) -> Result<RiskLevels> {
    Ok(match measure {
        MeasureKind::MES => RiskLevels::mes(level)?,
        _ => RiskLevels::new(level, level)?,
    })
}

fn institution_counts(measure: MeasureKind) -> &'static [usize] {
    match measure {
        MeasureKind::RCoVaR => &[2, 5, 10],
        _ => &[1, 2, 5, 10],
    }
}

/// The cells of `preset`. `scale` multiplies the calibration and
/// evaluation path counts only.
pub fn preset_cells(preset: Preset, scale: f64, filter: &GridFilter) -> Result<Vec<StudyCell>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(risk_sentinel_core::Error::Config(format!("scale must be positive, got {scale}")).into());
    }
    let reps = scaled(FULL_EVALUATION_REPS, scale, MIN_EVALUATION_REPS);
    let b = scaled(FULL_CALIBRATION_REPS, scale, MIN_CALIBRATION_REPS);
    let mut cells = Vec::new();
    for measure in MeasureKind::ALL {
        for level in [0.9, 0.95] {
            let ks: &[usize] = match preset {
                Preset::FirstAlarm if level == 0.9 => &[5],
                Preset::FirstAlarm => &[],
                _ => institution_counts(measure),
            };
            for &k in ks {
                if !filter.keep(measure, k, level) {
                    continue;
                }
                let base = StudyCell { reps, b, ..StudyCell::null(measure, levels_at(measure, level)?, k) };
                match preset {
                    Preset::SizeTable => cells.push(base),
                    Preset::PowerBreak | Preset::FirstAlarm => {
                        cells.extend(BREAK_GRID.iter().map(|&t_star| StudyCell { t_star, ..base.clone() }))
                    }
                    Preset::PowerMagnitude => cells.extend(BETA_POST_GRID.iter().map(|&beta_post| StudyCell {
                        t_star: 0,
                        beta_post,
                        ..base.clone()
                    })),
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(risk_sentinel_core::Error::Config(format!("the filters leave no cells in preset {preset}")).into());
    }
    Ok(cells)
}

/// Header of the results table.
pub const RESULTS_HEADER: [&str; 15] = [
    "preset",
    "measure",
    "k",
    "alpha",
    "beta",
    "n",
    "m",
    "iota",
    "t_star",
    "beta_post",
    "reps",
    "b",
    "joint_rate",
    "var_first",
    "sys_first",
];

pub fn results_row(preset: Preset, r: &CellResult) -> Vec<String> {
    let c = &r.cell;
    vec![
        preset.to_string(),
        c.measure.to_string(),
        c.k.to_string(),
        c.levels.alpha.to_string(),
        c.levels.beta.to_string(),
        c.n.to_string(),
        c.m.to_string(),
        c.iota.to_string(),
        c.t_star.to_string(),
        c.beta_post.to_string(),
        c.reps.to_string(),
        c.b.to_string(),
        r.joint_rate.to_string(),
        r.var_first_total().to_string(),
        r.sys_first_total().to_string(),
    ]
}

/// Header of the long-format attribution table.
pub const ATTRIBUTION_HEADER: [&str; 9] =
    ["preset", "measure", "k", "alpha", "beta", "t_star", "beta_post", "source", "first_rate"];

pub fn attribution_rows(preset: Preset, r: &CellResult) -> Vec<Vec<String>> {
    let c = &r.cell;
    let label = |source: String, rate: f64| {
        vec![
            preset.to_string(),
            c.measure.to_string(),
            c.k.to_string(),
            c.levels.alpha.to_string(),
            c.levels.beta.to_string(),
            c.t_star.to_string(),
            c.beta_post.to_string(),
            source,
            rate.to_string(),
        ]
    };
    let var = r.first_var.iter().enumerate().map(|(j, &v)| {
        let name = if r.first_var.len() == 1 { "var".to_owned() } else { format!("var_{}", j + 1) };
        label(name, v)
    });
    let sys = r.first_sys.iter().enumerate().map(|(j, &v)| label(format!("sys_{}", j + 1), v));
    var.chain(sys).collect()
}
