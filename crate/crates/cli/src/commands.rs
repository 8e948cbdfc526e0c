//! Subcommands and their flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use risk_sentinel_core::dgp::{
    forecast_with, simulate_dcc, BreakSpec, CovarTable, DccParams, Forecaster, TailPolicy, DEFAULT_BURNIN,
};
use risk_sentinel_core::nullsim::{calibrate, DEFAULT_GRID_STEP, DEFAULT_MOMENT_REPS};
use risk_sentinel_core::{
    monitor_finalize, monitor_init, monitor_step, CalibrationRequest, CriticalValues, Error, ForecastRecord,
    MeasureKind, MonitorConfig, MonitorReport, ObservationRecord, RiskLevels, SeedTree, DEFAULT_WEIGHT,
};

use crate::io::{self, AlarmLog, ForecastLayout};
use crate::study::{self, GridFilter, Preset, StudyRunner};

#[derive(Debug, Parser)]
#[command(
    name = "risk-sentinel",
    version,
    about = "Sequential surveillance of VaR, CoVaR, reverse CoVaR, CoES and MES forecasts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate time-uniform critical values by null simulation.
    CriticalValues(CriticalValuesArgs),
    /// Monitor a forecast panel against calibrated critical values.
    Monitor(MonitorArgs),
    /// Simulate a DCC-GARCH return panel and model-based forecasts.
    Simulate(SimulateArgs),
    /// Run a simulation study preset.
    Study(StudyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    Covar,
    Rcovar,
    Coes,
    Mes,
}

impl From<MeasureArg> for MeasureKind {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Covar => MeasureKind::CoVaR,
            MeasureArg::Rcovar => MeasureKind::RCoVaR,
            MeasureArg::Coes => MeasureKind::CoES,
            MeasureArg::Mes => MeasureKind::MES,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LevelArgs {
    /// Measure to monitor; `--alpha 0` selects mes.
    #[arg(long, value_enum)]
    pub measure: Option<MeasureArg>,
    /// Level of the systemic quantile; 0 for MES.
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// VaR level of the conditioning series.
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
}

impl LevelArgs {
    /// Resolves the measure and validates the levels against it.
    pub fn resolve(&self) -> Result<(MeasureKind, RiskLevels)> {
        let measure = match (self.measure, self.alpha == 0.0) {
            (None, true) | (Some(MeasureArg::Mes), true) => MeasureKind::MES,
            (Some(m), true) => {
                return Err(
                    Error::Config(format!("--alpha 0 is only valid for mes, not {}", MeasureKind::from(m))).into()
                )
            }
            (Some(MeasureArg::Mes), false) => {
                return Err(Error::Config(format!("mes requires --alpha 0, got {}", self.alpha)).into())
            }
            (Some(m), false) => m.into(),
            (None, false) => return Err(Error::Config("--measure is required unless --alpha 0".into()).into()),
        };
        Ok((measure, RiskLevels::for_measure(measure, self.alpha, self.beta)?))
    }
}

#[derive(Debug, Clone, Args)]
pub struct CriticalValuesArgs {
    #[command(flatten)]
    pub levels: LevelArgs,
    /// Monitoring horizon.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Window length.
    #[arg(long, default_value_t = 250)]
    pub m: usize,
    /// Number of monitored institutions K.
    #[arg(long, default_value_t = 1)]
    pub num_series: usize,
    /// Nominal size.
    #[arg(long, default_value_t = 0.1)]
    pub iota: f64,
    /// Weight of the unconditional detector component.
    #[arg(long, default_value_t = DEFAULT_WEIGHT)]
    pub a_weight: f64,
    /// Null paths for the supremum distribution (B).
    #[arg(long, default_value_t = 10_000)]
    pub reps: usize,
    /// Null windows for the detector moments.
    #[arg(long, default_value_t = DEFAULT_MOMENT_REPS)]
    pub moment_reps: usize,
    /// Step of the quantile-level grid.
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    pub grid_step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MonitorArgs {
    /// Critical values JSON.
    #[arg(long)]
    pub cv: PathBuf,
    /// Returns CSV (t,x,y1..yK).
    #[arg(long, required_unless_present = "stream", requires = "forecasts")]
    pub returns: Option<PathBuf>,
    /// Forecasts CSV in threshold or PIT layout.
    #[arg(long, requires = "returns")]
    pub forecasts: Option<PathBuf>,
    /// JSON-lines stream of {"observation", "forecast"} records; `-` reads stdin.
    #[arg(long, conflicts_with_all = ["returns", "forecasts"])]
    pub stream: Option<PathBuf>,
    /// Writes PREFIX_trace.csv and PREFIX_alarms.json.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// DCC parameter JSON; defaults to the symmetric baseline design.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// K for the baseline design when no parameter file is given.
    #[arg(long, default_value_t = 1, conflicts_with = "params")]
    pub num_series: usize,
    /// Break time; omitted means no break.
    #[arg(long)]
    pub break_t: Option<usize>,
    /// Post-break persistence.
    #[arg(long, default_value_t = 0.85)]
    pub beta_post: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_BURNIN)]
    pub burnin: usize,
    #[command(flatten)]
    pub levels: LevelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes PREFIX_returns.csv and PREFIX_forecasts.csv.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "size_table")]
    SizeTable,
    #[value(name = "power_break")]
    PowerBreak,
    #[value(name = "power_magnitude")]
    PowerMagnitude,
    #[value(name = "first_alarm")]
    FirstAlarm,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::SizeTable => Preset::SizeTable,
            PresetArg::PowerBreak => Preset::PowerBreak,
            PresetArg::PowerMagnitude => Preset::PowerMagnitude,
            PresetArg::FirstAlarm => Preset::FirstAlarm,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[arg(value_enum)]
    pub preset: PresetArg,
    /// Multiplies the calibration and evaluation path counts.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to these measures.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub measure: Vec<MeasureArg>,
    /// Restrict to these institution counts.
    #[arg(long, value_delimiter = ',')]
    pub num_series: Vec<usize>,
    /// Restrict to these probability levels.
    #[arg(long, value_delimiter = ',')]
    pub level: Vec<f64>,
    /// Writes PREFIX_results.csv and PREFIX_attribution.csv.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CriticalValues(args) => cmd_critical_values(&args).map(|_| ()),
        Command::Monitor(args) => {
            let report = cmd_monitor(&args)?;
            match report.first_alarm {
                Some(a) => println!(
                    "first alarm at T={} from {} (normalized value {}); {} alarms in {} steps",
                    a.t,
                    describe(a.source),
                    a.normalized_value,
                    report.alarms.len(),
                    report.steps
                ),
                None => println!("no alarm in {} steps", report.steps),
            }
            Ok(())
        }
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Study(args) => cmd_study(&args),
    }
}

fn describe(source: risk_sentinel_core::AlarmSource) -> String {
    match source {
        risk_sentinel_core::AlarmSource::Var(j) => format!("VaR detector {j}"),
        risk_sentinel_core::AlarmSource::Institution(j) => format!("institution {j}"),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_critical_values(args: &CriticalValuesArgs) -> Result<CriticalValues> {
    let (measure, levels) = args.levels.resolve()?;
    let mut req = CalibrationRequest::new(measure, levels, args.n, args.m, args.num_series, args.iota);
    req.a = args.a_weight;
    req.b = args.reps;
    req.b0 = args.moment_reps;
    req.grid_step = args.grid_step;
    req.seed = args.seed;
    let cv = calibrate(&req)?;
    let mut text = cv.to_json()?;
    text.push('\n');
    std::fs::write(&args.out, text).with_context(|| format!("cannot write {}", args.out.display()))?;
    println!("v={} c={} nu={} achieved={}", cv.v, cv.c, cv.nu, cv.achieved);
    Ok(cv)
}

pub fn load_critical_values(path: &Path) -> Result<CriticalValues> {
    CriticalValues::from_json(&io::read_text(path)?).with_context(|| format!("reading {}", path.display()))
}

fn check_layout(cv: &CriticalValues, layout: ForecastLayout) -> Result<()> {
    let expected = ForecastLayout::for_measure(cv.measure);
    if layout != expected {
        return Err(Error::Schema(format!(
            "forecast columns are in the {layout:?} layout, critical values are for {}",
            cv.measure
        ))
        .into());
    }
    Ok(())
}

/// Runs the online monitor over aligned records and writes the trace and
/// alarm log next to `out_prefix`.
pub fn monitor_records(
    cv: CriticalValues,
    records: impl Iterator<Item = Result<(ObservationRecord, ForecastRecord)>>,
    out_prefix: &Path,
) -> Result<MonitorReport> {
    let mut state = monitor_init(MonitorConfig::from_cv(&cv), cv)?;
    for rec in records {
        let (obs, fc) = rec?;
        monitor_step(&mut state, &fc, &obs)?;
    }
    let report = monitor_finalize(state)?;
    io::write_trace(&with_suffix(out_prefix, "_trace.csv"), report.measure, &report.trace)?;
    io::write_json(&with_suffix(out_prefix, "_alarms.json"), &AlarmLog::from_report(&report))?;
    Ok(report)
}

pub fn cmd_monitor(args: &MonitorArgs) -> Result<MonitorReport> {
    let cv = load_critical_values(&args.cv)?;
    if let Some(stream) = &args.stream {
        let reader: Box<dyn std::io::Read> = if stream.as_os_str() == "-" {
            Box::new(std::io::stdin().lock())
        } else {
            Box::new(std::fs::File::open(stream).with_context(|| format!("cannot open {}", stream.display()))?)
        };
        // A payload of the wrong kind is rejected by the monitor itself.
        let records = io::stream_records(reader).map(|r| r.map(|r| (r.observation, r.forecast)));
        return monitor_records(cv, records, &args.out_prefix);
    }
    let (returns, forecasts) = match (&args.returns, &args.forecasts) {
        (Some(r), Some(f)) => (r, f),
        _ => return Err(Error::Config("--returns and --forecasts are required without --stream".into()).into()),
    };
    let observations = io::read_returns(returns)?;
    let (layout, fc) = io::read_forecasts(forecasts)?;
    check_layout(&cv, layout)?;
    if observations.len() != fc.len() {
        return Err(Error::Schema(format!("{} return rows but {} forecast rows", observations.len(), fc.len())).into());
    }
    monitor_records(cv, observations.into_iter().zip(fc).map(Ok), &args.out_prefix)
}

/// Model-based forecaster for a simulated panel: CoVaR thresholds through
/// the interpolation table, CoES/MES with every tail PIT computed.
pub fn panel_forecaster(measure: MeasureKind, levels: RiskLevels, nu: f64) -> Result<Forecaster> {
    let f = Forecaster::new(measure, levels, nu)?;
    Ok(match measure {
        MeasureKind::CoVaR | MeasureKind::RCoVaR => f.with_table(CovarTable::build(nu, levels)?)?,
        MeasureKind::CoES | MeasureKind::MES => f.with_tail_policy(TailPolicy::Always),
    })
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let (measure, levels) = args.levels.resolve()?;
    let params = match &args.params {
        Some(path) => DccParams::from_json(&io::read_text(path)?)?,
        None => DccParams::baseline(args.num_series),
    };
    params.validate()?;
    let brk = args.break_t.map(|t_star| BreakSpec { t_star, beta_post: args.beta_post });
    let mut rng = SeedTree::new(args.seed).stream("simulate", 0);
    let sim = simulate_dcc(&params, brk.as_ref(), args.n, args.burnin, &mut rng)?;
    let forecaster = panel_forecaster(measure, levels, params.nu)?;
    let fc = forecast_with(&forecaster, &params, &sim.observations, &sim.presample)?;
    io::write_returns(&with_suffix(&args.out_prefix, "_returns.csv"), &sim.observations)?;
    io::write_forecasts(&with_suffix(&args.out_prefix, "_forecasts.csv"), ForecastLayout::for_measure(measure), &fc)?;
    println!("{} rows, K={}, measure {measure}", sim.observations.len(), params.k());
    Ok(())
}

pub fn cmd_study(args: &StudyArgs) -> Result<()> {
    let preset: Preset = args.preset.into();
    let filter = GridFilter {
        measures: args.measure.iter().map(|&m| m.into()).collect(),
        ks: args.num_series.clone(),
        levels: args.level.clone(),
    };
    let cells = study::preset_cells(preset, args.scale, &filter)?;
    let mut runner = StudyRunner::new(args.seed);
    let mut results = csv::Writer::from_path(with_suffix(&args.out_prefix, "_results.csv"))?;
    let mut attribution = csv::Writer::from_path(with_suffix(&args.out_prefix, "_attribution.csv"))?;
    results.write_record(study::RESULTS_HEADER)?;
    attribution.write_record(study::ATTRIBUTION_HEADER)?;
    for (i, cell) in cells.iter().enumerate() {
        let r = runner.run_cell(cell)?;
        eprintln!(
            "[{}/{}] {} K={} beta={} t*={} beta_post={}: joint {:.4}",
            i + 1,
            cells.len(),
            cell.measure,
            cell.k,
            cell.levels.beta,
            cell.t_star,
            cell.beta_post,
            r.joint_rate
        );
        results.write_record(study::results_row(preset, &r))?;
        for row in study::attribution_rows(preset, &r) {
            attribution.write_record(&row)?;
        }
        results.flush()?;
        attribution.flush()?;
    }
    Ok(())
}
