//! DCC simulation, the bivariate t tail and the model-based forecasts.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use risk_sentinel_core::dgp::{
    bivariate_t_upper_tail, covar_forecast, filter_history, make_forecast_panel, rcovar_forecast, simulate_dcc,
    standardized_covar, student_t_cdf, student_t_quantile, tail_pit, BreakSpec, CovarTable, DccParams, Forecaster,
    PairCov, DEFAULT_BURNIN,
};
use risk_sentinel_core::{build_indicator_panel, ForecastPayload, MeasureKind, RiskLevels, SeedTree};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn baseline_residuals_have_the_target_correlation() {
    let p = DccParams::baseline(1);
    let mut rng = SeedTree::new(1).stream("dcc", 0);
    let sim = simulate_dcc(&p, None, 100_000, DEFAULT_BURNIN, &mut rng).unwrap();
    assert_eq!(sim.observations.len(), 100_000);
    assert_eq!(sim.presample.len(), DEFAULT_BURNIN);
    assert_eq!(sim.observations[0].t, 1);
    let mut ex = Vec::new();
    let mut ey = Vec::new();
    for (o, c) in sim.observations.iter().zip(&sim.cov) {
        assert_eq!(c.corr(0, 0), 1.0);
        assert_eq!(c.corr(1, 1), 1.0);
        ex.push(o.x / c.d[0]);
        ey.push(o.y[0] / c.d[1]);
    }
    let r = corr(&ex, &ey);
    assert!((r - 0.5).abs() < 0.05, "residual correlation {r}");
    // Standardized residuals have unit variance.
    let var = ex.iter().map(|e| e * e).sum::<f64>() / ex.len() as f64;
    assert!((var - 1.0).abs() < 0.05, "residual variance {var}");
}

#[test]
fn degenerate_recursions_freeze_the_moments() {
    let mut p = DccParams::baseline(2);
    p.alpha_g = vec![0.0; 3];
    p.beta_g = vec![0.0; 3];
    p.alpha_q = 0.0;
    p.beta_q = 0.0;
    let mut rng = SeedTree::new(2).stream("dcc", 0);
    let sim = simulate_dcc(&p, None, 500, 50, &mut rng).unwrap();
    let first = &sim.cov[0];
    for c in &sim.cov {
        for i in 0..3 {
            assert!((c.d[i] - 0.1f64.sqrt()).abs() < 1e-15);
        }
        for (a, b) in c.r.iter().zip(&first.r) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    assert!((first.corr(0, 2) - 0.5).abs() < 1e-15);

    // Constant correlation with time-varying volatilities.
    let mut p = DccParams::baseline(2);
    p.alpha_q = 0.0;
    p.beta_q = 0.0;
    let sim = simulate_dcc(&p, None, 500, 50, &mut rng).unwrap();
    for c in &sim.cov {
        assert!((c.corr(1, 2) - 0.5).abs() < 1e-15);
    }
    assert!(sim.cov.iter().any(|c| (c.d[0] - sim.cov[0].d[0]).abs() > 1e-3));
}

#[test]
fn filter_reproduces_the_simulated_moments() {
    let p = DccParams::baseline(3);
    let mut rng = SeedTree::new(3).stream("dcc", 0);
    let sim = simulate_dcc(&p, None, 2000, DEFAULT_BURNIN, &mut rng).unwrap();
    let filtered = filter_history(&p, &sim.observations, &sim.presample).unwrap();
    assert_eq!(filtered, sim.cov);

    // After a break the pre-break filter diverges from the truth, and only
    // from t = t* + 1 on.
    let brk = BreakSpec { t_star: 1000, beta_post: 0.85 };
    let mut rng = SeedTree::new(3).stream("dcc", 1);
    let sim = simulate_dcc(&p, Some(&brk), 2000, DEFAULT_BURNIN, &mut rng).unwrap();
    let filtered = filter_history(&p, &sim.observations, &sim.presample).unwrap();
    assert_eq!(filtered[..1000], sim.cov[..1000]);
    assert_ne!(filtered[1000], sim.cov[1000]);
    let post = p.with_persistence(0.85).unwrap();
    assert!(post.beta_g.iter().all(|&b| b == 0.85) && post.beta_q == 0.85);

    assert!(simulate_dcc(&p, Some(&BreakSpec { t_star: 2001, beta_post: 0.85 }), 2000, 10, &mut rng).is_err());
}

#[test]
fn tail_respects_frechet_bounds_symmetry_and_monotonicity() {
    for nu in [5.0, f64::INFINITY] {
        let grid: Vec<f64> = (0..10).map(|i| -2.5 + 0.55 * i as f64).collect();
        let rhos = [-0.9, -0.4, 0.0, 0.4, 0.9];
        for &a in &grid {
            let pa = 1.0 - student_t_cdf(a, nu, true).unwrap();
            for &b in &grid {
                let pb = 1.0 - student_t_cdf(b, nu, true).unwrap();
                let mut prev = -1.0;
                for &rho in &rhos {
                    let p = bivariate_t_upper_tail(a, b, rho, nu).unwrap();
                    assert!(
                        p >= (pa + pb - 1.0).max(0.0) - 1e-12 && p <= pa.min(pb) + 1e-12,
                        "({a},{b},{rho}): {p} vs [{}, {}]",
                        (pa + pb - 1.0).max(0.0),
                        pa.min(pb)
                    );
                    let q = bivariate_t_upper_tail(b, a, rho, nu).unwrap();
                    assert!((p - q).abs() < 1e-12);
                    assert!(p >= prev - 1e-12, "not increasing in rho at ({a},{b})");
                    prev = p;
                    let further = bivariate_t_upper_tail(a + 0.3, b, rho, nu).unwrap();
                    assert!(further <= p + 1e-12);
                }
            }
        }
    }
}

#[test]
fn tail_matches_monte_carlo() {
    let nu: f64 = 5.0;
    let n = 10_000_000usize;
    let points = [(0.0, 0.0, 0.5), (1.2, 0.8, 0.5), (1.5, 1.5, 0.8), (-0.5, 1.0, -0.3), (2.0, 1.0, 0.2)];
    let chi = ChiSquared::new(nu).unwrap();
    let s = ((nu - 2.0) / nu).sqrt();
    let mut rng = SeedTree::new(4).stream("tail", 0);
    let mut hits = [0usize; 5];
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let mix = s / (chi.sample(&mut rng) / nu).sqrt();
        for (h, &(a, b, rho)) in hits.iter_mut().zip(&points) {
            let x = z1 * mix;
            let y = (rho * z1 + (1.0f64 - rho * rho).sqrt() * z2) * mix;
            if x > a && y > b {
                *h += 1;
            }
        }
    }
    for (h, &(a, b, rho)) in hits.iter().zip(&points) {
        let p = bivariate_t_upper_tail(a, b, rho, nu).unwrap();
        let freq = *h as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * sd, "({a},{b},{rho}): {freq} vs {p}");
    }
}

#[test]
fn covar_has_the_target_joint_exceedance_rate() {
    let nu: f64 = 5.0;
    let l = RiskLevels::new(0.95, 0.9).unwrap();
    let h = PairCov::from_sd(0.7, 1.9, 0.6);
    let f = covar_forecast(&h, nu, &l).unwrap();
    let n = 1_000_000;
    let chi = ChiSquared::new(nu).unwrap();
    let s = ((nu - 2.0) / nu).sqrt();
    let mut rng = SeedTree::new(5).stream("covar", 0);
    let (mut var_hits, mut joint_hits) = (0usize, 0usize);
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let mix = s / (chi.sample(&mut rng) / nu).sqrt();
        let x = 0.7 * z1 * mix;
        let y = 1.9 * (0.6 * z1 + 0.8 * z2) * mix;
        if x > f.var_hat {
            var_hits += 1;
            if y > f.sys_hat {
                joint_hits += 1;
            }
        }
    }
    for (hits, p) in [(var_hits, l.var_rate()), (joint_hits, l.joint_rate())] {
        let freq = hits as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * sd, "{freq} vs {p}");
    }
}

#[test]
fn reverse_covar_swaps_roles() {
    let l = RiskLevels::new(0.9, 0.95).unwrap();
    let sym = PairCov::from_sd(1.4, 1.4, 0.3);
    assert_eq!(covar_forecast(&sym, 5.0, &l).unwrap(), rcovar_forecast(&sym, 5.0, &l).unwrap());
    let h = PairCov::from_sd(0.5, 2.0, -0.2);
    assert_eq!(rcovar_forecast(&h, 5.0, &l).unwrap(), covar_forecast(&h.swap(), 5.0, &l).unwrap());
    let r = rcovar_forecast(&h, 5.0, &l).unwrap();
    assert!((r.var_hat - 2.0 * student_t_quantile(0.95, 5.0, true).unwrap()).abs() < 1e-12);
}

#[test]
fn covar_exceeds_var_for_positive_dependence() {
    let l = RiskLevels::new(0.95, 0.95).unwrap();
    let q = student_t_quantile(0.95, 5.0, true).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for rho in [0.0, 0.2, 0.5, 0.8, 0.95] {
        let c = standardized_covar(rho, 5.0, &l).unwrap();
        assert!(c >= q - 1e-9 && c > prev);
        prev = c;
    }
}

#[test]
fn tail_pit_limits_and_independent_gaussian_case() {
    let l = RiskLevels::new(0.9, 0.9).unwrap();
    let h = PairCov::from_sd(1.0, 2.0, 0.5);
    let (_, hi) = tail_pit(1e6, 0.3, &h, 5.0, &l).unwrap();
    let (_, lo) = tail_pit(-1e6, 0.3, &h, 5.0, &l).unwrap();
    assert!((hi - 1.0).abs() < 1e-9 && lo.abs() < 1e-9);
    let (px, _) = tail_pit(0.0, 0.0, &h, 5.0, &l).unwrap();
    assert!((px - 0.5).abs() < 1e-15);

    let indep = PairCov::from_sd(1.0, 2.0, 0.0);
    for y in [-3.0, -1.0, 0.0, 0.7, 2.5, 5.0] {
        let (_, pt) = tail_pit(y, 0.0, &indep, f64::INFINITY, &l).unwrap();
        let phi = student_t_cdf(y / 2.0, f64::INFINITY, true).unwrap();
        assert!((pt - phi).abs() < 1e-10, "y={y}: {pt} vs {phi}");
    }
}

#[test]
fn covar_table_tracks_the_exact_solver() {
    for (nu, l) in [(5.0, RiskLevels::new(0.9, 0.9).unwrap()), (f64::INFINITY, RiskLevels::new(0.95, 0.9).unwrap())] {
        let table = CovarTable::build(nu, l).unwrap();
        for i in 0..=80 {
            let rho = -0.99 + 1.98 * i as f64 / 80.0 + 1e-3 * (i % 3) as f64;
            let exact = standardized_covar(rho, nu, &l).unwrap();
            let approx = table.eval(rho).unwrap();
            assert!((exact - approx).abs() <= 1e-9, "rho={rho}: {exact} vs {approx}");
        }
        // Outside the tabulated range the exact solver is used.
        assert_eq!(table.eval(0.99995).unwrap(), standardized_covar(0.99995, nu, &l).unwrap());
        let mismatch = CovarTable::build(nu, RiskLevels::new(0.8, 0.9).unwrap()).unwrap();
        assert!(Forecaster::new(MeasureKind::CoVaR, l, nu).unwrap().with_table(mismatch).is_err());
    }
}

#[test]
fn true_forecasts_give_null_evidence_rates() {
    let p = DccParams::baseline(2);
    let l = RiskLevels::new(0.9, 0.9).unwrap();
    let mut rng = SeedTree::new(6).stream("dcc", 0);
    let n = 20_000;
    let sim = simulate_dcc(&p, None, n, DEFAULT_BURNIN, &mut rng).unwrap();
    let fc = make_forecast_panel(&p, &sim.observations, &sim.presample, MeasureKind::CoVaR, l).unwrap();
    assert!(
        matches!(&fc[0].payload, ForecastPayload::Thresholds { var_hat, sys_hat } if var_hat.len() == 1 && sys_hat.len() == 2)
    );
    let panel = build_indicator_panel(&sim.observations, &fc, MeasureKind::CoVaR, l).unwrap();
    let rate = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let sd = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
    let v = rate(&panel.var_streams()[0]);
    assert!((v - 0.1).abs() < 4.0 * sd(0.1), "VaR rate {v}");
    for e in panel.evidence() {
        let r = rate(e);
        assert!((r - 0.01).abs() < 4.0 * sd(0.01), "joint rate {r}");
    }
}
