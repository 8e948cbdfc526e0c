//! End-to-end runs of the binary and of the command functions.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use risk_sentinel::commands::{monitor_records, panel_forecaster};
use risk_sentinel::io::{self, AlarmLog, ForecastLayout};
use risk_sentinel_core::dgp::{forecast_with, simulate_dcc, DccParams, DEFAULT_BURNIN};
use risk_sentinel_core::nullsim::calibrate;
use risk_sentinel_core::{AlarmSource, CalibrationRequest, ForecastPayload, MeasureKind, RiskLevels, SeedTree};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_risk-sentinel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small critical values for a given measure, written by the binary.
fn write_cv(dir: &TempDir, name: &str, measure_args: &[&str], k: usize, seed: u64) -> PathBuf {
    let out = p(dir, name);
    let k = k.to_string();
    let seed = seed.to_string();
    let mut args = vec!["critical-values"];
    args.extend_from_slice(measure_args);
    args.extend_from_slice(&[
        "--n",
        "300",
        "--m",
        "50",
        "--num-series",
        &k,
        "--reps",
        "200",
        "--moment-reps",
        "10000",
        "--seed",
        &seed,
        "--out",
        s(&out),
    ]);
    let res = run(&args);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn simulate(dir: &TempDir, prefix: &str, measure_args: &[&str], k: usize, n: usize, extra: &[&str]) -> PathBuf {
    let pre = p(dir, prefix);
    let (k, n) = (k.to_string(), n.to_string());
    let mut args = vec!["simulate", "--num-series", &k, "--n", &n, "--burnin", "100", "--out-prefix", s(&pre)];
    args.extend_from_slice(measure_args);
    args.extend_from_slice(extra);
    let res = run(&args);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    pre
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", prefix.display()))
}

#[test]
fn critical_values_are_reproducible_and_infeasible_levels_fail() {
    let dir = TempDir::new().unwrap();
    let a = write_cv(&dir, "a.json", &["--measure", "covar"], 2, 7);
    let b = write_cv(&dir, "b.json", &["--measure", "covar"], 2, 7);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = write_cv(&dir, "c.json", &["--measure", "covar"], 2, 8);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let res = run(&[
        "critical-values",
        "--measure",
        "covar",
        "--iota",
        "1e-9",
        "--reps",
        "100",
        "--n",
        "300",
        "--m",
        "50",
        "--moment-reps",
        "10000",
        "--out",
        s(&p(&dir, "x.json")),
    ]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));

    let res = run(&["critical-values", "--measure", "mes", "--alpha", "0.9", "--out", s(&p(&dir, "y.json"))]);
    assert_eq!(code(&res), 2);
    let res = run(&["critical-values", "--measure", "covar", "--moment-reps", "10", "--out", s(&p(&dir, "z.json"))]);
    assert_eq!(code(&res), 2);
}

#[test]
fn simulated_panels_have_the_documented_shape() {
    let dir = TempDir::new().unwrap();
    let pre = simulate(&dir, "cv", &["--measure", "covar"], 3, 120, &[]);
    let obs = io::read_returns(&suffixed(&pre, "_returns.csv")).unwrap();
    assert_eq!(obs.len(), 120);
    assert!(obs.iter().all(|o| o.y.len() == 3));
    assert_eq!(obs[0].t, 1);
    let (layout, fc) = io::read_forecasts(&suffixed(&pre, "_forecasts.csv")).unwrap();
    assert_eq!(layout, ForecastLayout::Covar);
    assert_eq!(fc.len(), 120);

    let again = simulate(&dir, "cv2", &["--measure", "covar"], 3, 120, &[]);
    for suffix in ["_returns.csv", "_forecasts.csv"] {
        assert_eq!(std::fs::read(suffixed(&pre, suffix)).unwrap(), std::fs::read(suffixed(&again, suffix)).unwrap());
    }

    let mes = simulate(&dir, "mes", &["--alpha", "0"], 2, 50, &[]);
    let (layout, _) = io::read_forecasts(&suffixed(&mes, "_forecasts.csv")).unwrap();
    assert_eq!(layout, ForecastLayout::Pit);
    let rc = simulate(&dir, "rc", &["--measure", "rcovar"], 2, 50, &["--break-t", "10"]);
    let (layout, _) = io::read_forecasts(&suffixed(&rc, "_forecasts.csv")).unwrap();
    assert_eq!(layout, ForecastLayout::Rcovar);

    let bad = run(&["simulate", "--alpha", "0", "--measure", "covar", "--out-prefix", s(&p(&dir, "bad"))]);
    assert_eq!(code(&bad), 2);
    let bad = run(&["simulate", "--measure", "covar", "--break-t", "5000", "--out-prefix", s(&p(&dir, "bad"))]);
    assert_eq!(code(&bad), 2);
    let params = p(&dir, "params.json");
    let mut unstable = DccParams::baseline(1);
    unstable.beta_g[0] = 0.95;
    std::fs::write(&params, unstable.to_json().unwrap()).unwrap();
    let bad = run(&["simulate", "--measure", "covar", "--params", s(&params), "--out-prefix", s(&p(&dir, "bad"))]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn csv_files_round_trip_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    for (measure, name) in
        [(&["--measure", "rcovar"][..], "rc"), (&["--measure", "coes"][..], "co"), (&["--measure", "covar"][..], "cv")]
    {
        let pre = simulate(&dir, name, measure, 2, 80, &[]);
        let returns = suffixed(&pre, "_returns.csv");
        let copy = p(&dir, "copy.csv");
        io::write_returns(&copy, &io::read_returns(&returns).unwrap()).unwrap();
        assert_eq!(std::fs::read(&returns).unwrap(), std::fs::read(&copy).unwrap());

        let forecasts = suffixed(&pre, "_forecasts.csv");
        let (layout, fc) = io::read_forecasts(&forecasts).unwrap();
        io::write_forecasts(&copy, layout, &fc).unwrap();
        assert_eq!(std::fs::read(&forecasts).unwrap(), std::fs::read(&copy).unwrap());
    }

    let cv = write_cv(&dir, "cv.json", &["--measure", "rcovar"], 2, 3);
    let pre = simulate(&dir, "mon", &["--measure", "rcovar"], 2, 300, &[]);
    let out = p(&dir, "report");
    let res = run(&[
        "monitor",
        "--cv",
        s(&cv),
        "--returns",
        s(&suffixed(&pre, "_returns.csv")),
        "--forecasts",
        s(&suffixed(&pre, "_forecasts.csv")),
        "--out-prefix",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let trace_path = suffixed(&out, "_trace.csv");
    let trace = io::read_trace(&trace_path).unwrap();
    io::write_trace(&p(&dir, "trace_copy.csv"), MeasureKind::RCoVaR, &trace).unwrap();
    assert_eq!(std::fs::read(&trace_path).unwrap(), std::fs::read(p(&dir, "trace_copy.csv")).unwrap());
}

#[test]
fn monitor_writes_trace_and_alarms() {
    let dir = TempDir::new().unwrap();
    for (args, k, columns) in [
        (&["--measure", "covar"][..], 3, 1 + 1 + 3),
        (&["--measure", "rcovar"][..], 3, 1 + 6),
        (&["--measure", "coes"][..], 2, 1 + 1 + 2),
        (&["--alpha", "0"][..], 2, 1 + 1 + 2),
    ] {
        let cv = write_cv(&dir, "cv.json", args, k, 1);
        let pre = simulate(&dir, "panel", args, k, 300, &["--break-t", "50"]);
        let out = p(&dir, "report");
        let res = run(&[
            "monitor",
            "--cv",
            s(&cv),
            "--returns",
            s(&suffixed(&pre, "_returns.csv")),
            "--forecasts",
            s(&suffixed(&pre, "_forecasts.csv")),
            "--out-prefix",
            s(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        let text = std::fs::read_to_string(suffixed(&out, "_trace.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), columns);
        assert_eq!(lines.count(), 300 - 50 + 1);
        let log: AlarmLog =
            serde_json::from_str(&std::fs::read_to_string(suffixed(&out, "_alarms.json")).unwrap()).unwrap();
        assert_eq!(log.steps, 300);
        assert_eq!(log.first_alarm.is_some(), !log.alarms.is_empty());
        let stdout = String::from_utf8_lossy(&res.stdout);
        assert!(stdout.contains("alarm"), "{stdout}");
    }
}

#[test]
fn monitor_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let cv = write_cv(&dir, "cv.json", &["--measure", "covar"], 2, 1);
    let pits = simulate(&dir, "pits", &["--measure", "coes"], 2, 100, &[]);
    let thr = simulate(&dir, "thr", &["--measure", "covar"], 2, 100, &[]);
    let out = s(&p(&dir, "r")).to_owned();
    let monitor = |returns: &Path, forecasts: &Path| {
        run(&["monitor", "--cv", s(&cv), "--returns", s(returns), "--forecasts", s(forecasts), "--out-prefix", &out])
    };
    // Wrong forecast layout for the critical values.
    assert_eq!(code(&monitor(&suffixed(&pits, "_returns.csv"), &suffixed(&pits, "_forecasts.csv"))), 2);
    // Missing file.
    assert_eq!(code(&monitor(&p(&dir, "nope.csv"), &suffixed(&thr, "_forecasts.csv"))), 1);
    // Broken header.
    let broken = p(&dir, "broken.csv");
    let text = std::fs::read_to_string(suffixed(&thr, "_returns.csv")).unwrap().replacen("y2", "z2", 1);
    std::fs::write(&broken, text).unwrap();
    assert_eq!(code(&monitor(&broken, &suffixed(&thr, "_forecasts.csv"))), 2);
    // K differs from the critical values.
    let k3 = simulate(&dir, "k3", &["--measure", "covar"], 3, 100, &[]);
    assert_eq!(code(&monitor(&suffixed(&k3, "_returns.csv"), &suffixed(&k3, "_forecasts.csv"))), 2);
    // Beyond the horizon.
    let long = simulate(&dir, "long", &["--measure", "covar"], 2, 301, &[]);
    assert_eq!(code(&monitor(&suffixed(&long, "_returns.csv"), &suffixed(&long, "_forecasts.csv"))), 2);
    // Shorter than one window.
    let short = simulate(&dir, "short", &["--measure", "covar"], 2, 20, &[]);
    assert_eq!(code(&monitor(&suffixed(&short, "_returns.csv"), &suffixed(&short, "_forecasts.csv"))), 2);
    // Corrupt critical values.
    std::fs::write(p(&dir, "bad.json"), "{\"measure\": \"covar\"}").unwrap();
    let res = run(&[
        "monitor",
        "--cv",
        s(&p(&dir, "bad.json")),
        "--returns",
        s(&suffixed(&thr, "_returns.csv")),
        "--forecasts",
        s(&suffixed(&thr, "_forecasts.csv")),
        "--out-prefix",
        &out,
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn streaming_input_matches_csv_input() {
    let dir = TempDir::new().unwrap();
    let cv = write_cv(&dir, "cv.json", &["--measure", "coes"], 2, 4);
    let pre = simulate(&dir, "panel", &["--measure", "coes"], 2, 200, &["--break-t", "20"]);
    let obs = io::read_returns(&suffixed(&pre, "_returns.csv")).unwrap();
    let (_, fc) = io::read_forecasts(&suffixed(&pre, "_forecasts.csv")).unwrap();
    let mut lines = String::new();
    for (o, f) in obs.into_iter().zip(fc) {
        lines.push_str(&serde_json::to_string(&io::StreamRecord { observation: o, forecast: f }).unwrap());
        lines.push('\n');
    }

    let csv_out = p(&dir, "csv");
    let res = run(&[
        "monitor",
        "--cv",
        s(&cv),
        "--returns",
        s(&suffixed(&pre, "_returns.csv")),
        "--forecasts",
        s(&suffixed(&pre, "_forecasts.csv")),
        "--out-prefix",
        s(&csv_out),
    ]);
    assert_eq!(code(&res), 0);

    let stream_out = p(&dir, "stream");
    let mut child = bin()
        .args(["monitor", "--cv", s(&cv), "--stream", "-", "--out-prefix", s(&stream_out)])
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(lines.as_bytes()).unwrap();
    assert!(child.wait().unwrap().success());
    for suffix in ["_trace.csv", "_alarms.json"] {
        assert_eq!(
            std::fs::read(suffixed(&csv_out, suffix)).unwrap(),
            std::fs::read(suffixed(&stream_out, suffix)).unwrap()
        );
    }
}

#[test]
fn thread_variable_is_validated() {
    let dir = TempDir::new().unwrap();
    let out = s(&p(&dir, "x")).to_owned();
    let res = bin()
        .env("RISK_SENTINEL_THREADS", "zero")
        .args(["simulate", "--measure", "covar", "--n", "10", "--out-prefix", &out])
        .output()
        .unwrap();
    assert_eq!(code(&res), 2);
    let res = bin()
        .env("RISK_SENTINEL_THREADS", "2")
        .args(["simulate", "--measure", "covar", "--n", "10", "--out-prefix", &out])
        .output()
        .unwrap();
    assert_eq!(code(&res), 0);
}

#[test]
fn study_output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let pre = p(&dir, &format!("study{i}"));
        let res = bin()
            .env("RISK_SENTINEL_THREADS", threads)
            .args([
                "study",
                "size_table",
                "--measure",
                "mes",
                "--num-series",
                "2",
                "--level",
                "0.9",
                "--scale",
                "0.01",
                "--seed",
                "5",
                "--out-prefix",
                s(&pre),
            ])
            .output()
            .unwrap();
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        outputs.push((
            std::fs::read_to_string(suffixed(&pre, "_results.csv")).unwrap(),
            std::fs::read_to_string(suffixed(&pre, "_attribution.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let (results, attribution) = &outputs[0];
    assert_eq!(results.lines().count(), 2);
    assert!(results.starts_with("preset,measure,k,alpha,beta"));
    // One VaR row and two institution rows.
    assert_eq!(attribution.lines().count(), 4);

    let res =
        run(&["study", "size_table", "--measure", "rcovar", "--num-series", "1", "--out-prefix", s(&p(&dir, "e"))]);
    assert_eq!(code(&res), 2);
}

/// Halving one institution's CoVaR forecasts makes it the first to alarm.
#[test]
fn attribution_names_the_misspecified_institution() {
    let dir = TempDir::new().unwrap();
    let (k, n) = (3, 1000);
    let levels = RiskLevels::new(0.9, 0.9).unwrap();
    let mut req = CalibrationRequest::new(MeasureKind::CoVaR, levels, n, 250, k, 0.1);
    req.b = 1000;
    req.seed = 11;
    let cv = calibrate(&req).unwrap();
    let params = DccParams::baseline(k);
    let forecaster = panel_forecaster(MeasureKind::CoVaR, levels, params.nu).unwrap();
    let tree = SeedTree::new(12);
    let mut named = 0;
    for r in 0..100 {
        let mut rng = tree.stream("paths", r);
        let sim = simulate_dcc(&params, None, n, DEFAULT_BURNIN, &mut rng).unwrap();
        let mut fc = forecast_with(&forecaster, &params, &sim.observations, &sim.presample).unwrap();
        for f in &mut fc {
            if let ForecastPayload::Thresholds { sys_hat, .. } = &mut f.payload {
                sys_hat[1] *= 0.5;
            }
        }
        let records = sim.observations.into_iter().zip(fc).map(Ok);
        let report = monitor_records(cv.clone(), records, &p(&dir, "run")).unwrap();
        if report.first_alarm.map(|a| a.source) == Some(AlarmSource::Institution(2)) {
            named += 1;
        }
    }
    assert!(named > 90, "institution 2 flagged first in {named} of 100 runs");
}
