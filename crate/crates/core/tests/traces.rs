//! Rolling traces, their agreement with window-level functions and their
//! null behaviour.

use proptest::prelude::*;
use risk_sentinel_core::detectors::{
    gini_from_window, hong_bandwidth, hong_from_window, ks_from_window, standardize, window_violation_stat,
};
use risk_sentinel_core::nullsim::{estimate_null_moments, simulate_null_panel};
use risk_sentinel_core::{detector_trace, IndicatorPanel, MeasureKind, NullMoments, RiskLevels, SeedTree};

fn moments(measure: MeasureKind, m: usize, levels: RiskLevels) -> NullMoments {
    NullMoments {
        measure,
        m,
        levels,
        mean_uc: 0.05,
        var_uc: 0.002,
        mean_iid: 0.3,
        var_iid: 0.04,
        mean_uc_var: 0.04,
        var_uc_var: 0.003,
        mean_iid_var: 0.2,
        var_iid_var: 0.05,
        b0: 10_000,
    }
}

fn expected_var(w: &[f64], l: &RiskLevels, mo: &NullMoments, a: f64) -> f64 {
    let uc = window_violation_stat(w, w.len(), l.var_rate()).unwrap();
    let g = gini_from_window(w);
    a * standardize(uc, mo.mean_uc_var, mo.var_uc_var).unwrap()
        + (1.0 - a) * standardize(g, mo.mean_iid_var, mo.var_iid_var).unwrap()
}

fn expected_sys(measure: MeasureKind, w: &[f64], l: &RiskLevels, mo: &NullMoments, a: f64) -> f64 {
    let (uc, iid) = if measure.has_binary_evidence() {
        (window_violation_stat(w, w.len(), l.joint_rate()).unwrap(), gini_from_window(w))
    } else {
        (ks_from_window(w, l).unwrap(), hong_from_window(w, hong_bandwidth(w.len())).unwrap())
    };
    a * standardize(uc, mo.mean_uc, mo.var_uc).unwrap() + (1.0 - a) * standardize(iid, mo.mean_iid, mo.var_iid).unwrap()
}

#[test]
fn trace_agrees_with_window_functions() {
    for measure in MeasureKind::ALL {
        let l = match measure {
            MeasureKind::MES => RiskLevels::mes(0.8).unwrap(),
            _ => RiskLevels::new(0.7, 0.8).unwrap(),
        };
        let m = 30;
        let mut rng = SeedTree::new(11).stream("trace", 0);
        let panel = simulate_null_panel(measure, l, 3, 120, &mut rng).unwrap();
        let mo = moments(measure, m, l);
        let a = 0.3;
        let tr = detector_trace(&panel, m, a, &mo).unwrap();
        assert_eq!(tr.len(), 120 - m + 1);
        for (i, _) in tr.t.iter().enumerate() {
            for (s, series) in panel.var_streams().iter().enumerate() {
                let want = expected_var(&series[i..i + m], &l, &mo, a);
                let got = tr.var_det[s][i];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{measure} var {s} at {i}");
            }
            for (k, series) in panel.evidence().iter().enumerate() {
                let want = expected_sys(measure, &series[i..i + m], &l, &mo, a);
                let got = tr.sys_det[k][i];
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{measure} sys {k} at {i}");
            }
        }
    }
}

#[test]
fn unit_weight_gives_the_standardized_unconditional_statistic() {
    let l = RiskLevels::new(0.9, 0.9).unwrap();
    let m = 20;
    let mut rng = SeedTree::new(3).stream("unit", 0);
    let panel = simulate_null_panel(MeasureKind::CoVaR, l, 2, 60, &mut rng).unwrap();
    let mo = moments(MeasureKind::CoVaR, m, l);
    let tr = detector_trace(&panel, m, 1.0, &mo).unwrap();
    for i in 0..tr.len() {
        let w = &panel.var_streams()[0][i..i + m];
        let v = window_violation_stat(w, m, l.var_rate()).unwrap();
        assert_eq!(tr.var_det[0][i], standardize(v, mo.mean_uc_var, mo.var_uc_var).unwrap());
    }
}

#[test]
fn single_window_panel_has_one_point() {
    let l = RiskLevels::new(0.9, 0.9).unwrap();
    let panel =
        IndicatorPanel::from_streams(MeasureKind::CoVaR, l, 1, vec![vec![0.0; 25]], vec![vec![0.0; 25]]).unwrap();
    let tr = detector_trace(&panel, 25, 0.5, &moments(MeasureKind::CoVaR, 25, l)).unwrap();
    assert_eq!(tr.t, vec![25]);
}

#[test]
fn null_traces_are_centred() {
    for measure in [MeasureKind::CoVaR, MeasureKind::CoES] {
        let l = RiskLevels::new(0.9, 0.9).unwrap();
        let m = 100;
        let mo = estimate_null_moments(measure, l, m, 20_000, 5).unwrap();
        // Non-overlapping windows so that the 10^4 values are independent.
        let mut sums = [0.0; 2];
        let reps = 10_000;
        let tree = SeedTree::new(6);
        for r in 0..reps {
            let mut rng = tree.stream("centre", r);
            let panel = simulate_null_panel(measure, l, 1, m, &mut rng).unwrap();
            let tr = detector_trace(&panel, m, 0.5, &mo).unwrap();
            sums[0] += tr.var_det[0][0];
            sums[1] += tr.sys_det[0][0];
        }
        for s in sums {
            assert!((s / reps as f64).abs() < 0.1, "{measure}: mean {}", s / reps as f64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn traces_are_translation_equivariant(seed in 0u64..1000, shift in -500i64..500) {
        let l = RiskLevels::new(0.8, 0.8).unwrap();
        let m = 15;
        let mut rng = SeedTree::new(seed).stream("shift", 0);
        let panel = simulate_null_panel(MeasureKind::CoES, l, 2, 50, &mut rng).unwrap();
        let mo = moments(MeasureKind::CoES, m, l);
        let base = detector_trace(&panel, m, 0.5, &mo).unwrap();
        let moved_panel = panel.clone().with_t0(panel.t0() + shift);
        let moved = detector_trace(&moved_panel, m, 0.5, &mo).unwrap();
        prop_assert_eq!(&base.var_det, &moved.var_det);
        prop_assert_eq!(&base.sys_det, &moved.sys_det);
        let shifted: Vec<i64> = base.t.iter().map(|t| t + shift).collect();
        prop_assert_eq!(shifted, moved.t);
    }
}
