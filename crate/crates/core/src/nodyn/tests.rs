use super::*;
use crate::doe::{make_schedule, DoeDesign, Ordering};
use crate::sim::{simulate, Versions};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short_cycle(n: usize) -> DrivingCycle {
    let full = DrivingCycle::default_cycle();
    DrivingCycle::new(full.dt, full.speed_setpoint[..n].to_vec()).unwrap()
}

fn scheduled_run(n: usize, seed: u64) -> (WorkflowConfig, DrivingCycle, Schedule, DataTable) {
    let config = WorkflowConfig::test_case();
    let cycle = short_cycle(n);
    let design = DoeDesign::full_factorial(&config.module_names()).unwrap();
    let schedule = make_schedule(&design, n, 20, Ordering::Random, seed).unwrap();
    let table = simulate(&config, &cycle, Versions::PerStep(schedule.steps())).unwrap();
    (config, cycle, schedule, table)
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("x{j}")).collect()
}

#[test]
fn reference_run_replays_with_zero_deviation() {
    let config = WorkflowConfig::test_case();
    let cycle = short_cycle(400);
    let reference = VersionVector::reference(config.module_count());
    let t0 = simulate(&config, &cycle, Versions::Constant(&reference)).unwrap();
    let star = build_oracle(&t0, &config, &cycle).unwrap();
    assert_eq!(star.nrows(), t0.nrows() - 1);
    for name in star.names() {
        let a = t0.column(name).unwrap();
        let b = star.column(name).unwrap();
        for t in 0..star.nrows() {
            assert_eq!(a[t + 1], b[t], "{name} at {t}");
        }
    }
}

#[test]
fn deviation_vanishes_without_perturbed_modules() {
    let (config, cycle, schedule, table) = scheduled_run(2000, 3);
    let star = build_oracle(&table, &config, &cycle).unwrap();
    let battery = config.module_index("Battery").unwrap();
    let motor = config.module_index("Motor").unwrap();
    let mut motor_signal = 0.0;
    for t in 0..star.nrows() {
        let flags = &schedule.steps()[t].0;
        for name in state_columns() {
            let dev = table.get(t + 1, &name).unwrap() - star.get(t, &name).unwrap();
            if !flags[battery] && !flags[motor] {
                assert_eq!(dev, 0.0, "{name} at {t}");
            } else if flags[motor] && name.starts_with("M_") {
                motor_signal += dev.abs();
            }
        }
    }
    assert!(motor_signal > 0.0);
}

#[test]
fn oracle_rejects_misaligned_cycle() {
    let (config, _, _, table) = scheduled_run(200, 0);
    assert!(build_oracle(&table, &config, &short_cycle(150)).is_err());
}

#[test]
fn one_row_is_dropped_per_boundary() {
    let n = 1000;
    let (config, cycle, schedule, table) = scheduled_run(n, 1);
    let star = build_oracle(&table, &config, &cycle).unwrap();
    let ds = build_dataset(&table, &star, &schedule, &DatasetOptions::default()).unwrap();
    let boundaries = n / 20 - 1;
    assert_eq!(ds.nrows(), n - 2 - boundaries);
    for &t in &ds.rows {
        assert_eq!(schedule.segment_of(t), schedule.segment_of(t + 1));
    }
}

#[test]
fn boolean_group_width_follows_interaction_order() {
    let (config, cycle, schedule, table) = scheduled_run(400, 2);
    let star = build_oracle(&table, &config, &cycle).unwrap();
    for (order, width) in [(1, 4), (2, 10), (4, 15)] {
        let opts = DatasetOptions {
            interaction_order: order,
            ..Default::default()
        };
        let ds = build_dataset(&table, &star, &schedule, &opts).unwrap();
        let booleans = ds.groups.iter().filter(|g| **g == RegressorGroup::Boolean).count();
        assert_eq!(booleans, width);
        let mut unique = ds.regressor_names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), ds.regressor_names.len());
    }
    let opts = DatasetOptions {
        include_cross_terms: true,
        ..Default::default()
    };
    let ds = build_dataset(&table, &star, &schedule, &opts).unwrap();
    assert!(ds.regressor_names.iter().any(|n| n == "speed_setpoint:X_Motor"));
}

#[test]
fn all_lag_mode_keeps_an_independent_subset() {
    let (config, cycle, schedule, table) = scheduled_run(1200, 4);
    let star = build_oracle(&table, &config, &cycle).unwrap();
    let ds = build_dataset(&table, &star, &schedule, &DatasetOptions::default()).unwrap();
    assert!(!ds.shared_lags.is_empty());
    assert!(ds.shared_lags.len() < ds.response_names.len());
    let fits = fit_dataset(&ds).unwrap();
    assert_eq!(fits.len(), ds.response_names.len());
}

#[test]
fn lag_isolating_one_row_is_dropped() {
    let n = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let regressors = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
    let mut lags = DMatrix::zeros(n, 3);
    for r in 0..n {
        lags[(r, 0)] = rng.random::<f64>();
        lags[(r, 1)] = rng.random::<f64>();
        lags[(r, 2)] = 2.0 * lags[(r, 0)] - lags[(r, 1)];
    }
    lags[(17, 2)] += 0.5;
    assert_eq!(independent_lags(&regressors, &lags), vec![0, 1]);
    let spike = DMatrix::from_fn(n, 1, |r, _| if r == 17 { 1.0 } else { 0.0 });
    assert!(independent_lags(&regressors, &spike).is_empty());
}

#[test]
fn ols_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(10..60);
        let k = rng.random_range(1..6);
        let x = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fit = ols(&x, &y, &names(k)).unwrap();
        let xt = x.transpose();
        let oracle = (&xt * &x).try_inverse().unwrap() * &xt * DVector::from_column_slice(&y);
        for j in 0..k {
            assert!((fit.coef[j] - oracle[j]).abs() <= 1e-8 * (1.0 + oracle[j].abs()));
        }
    }
}

#[test]
fn zero_response_gives_zero_coefficients_and_unit_p() {
    let (config, cycle, schedule, table) = scheduled_run(600, 5);
    let star = build_oracle(&table, &config, &cycle).unwrap();
    let mut ds = build_dataset(&table, &star, &schedule, &DatasetOptions::default()).unwrap();
    ds.responses.column_mut(0).fill(0.0);
    let fits = fit_dataset(&ds).unwrap();
    assert!(fits[0].coef.iter().all(|c| *c == 0.0));
    assert!(fits[0].p_values.iter().all(|p| *p == 1.0));
}

#[test]
fn duplicated_regressor_is_named() {
    let x = DMatrix::from_fn(20, 4, |i, j| match j {
        0 => 1.0,
        2 => (i * i) as f64,
        _ => i as f64,
    });
    let y: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
    let err = ols(&x, &y, &names(4)).unwrap_err();
    match err {
        Error::RankDeficient(cols) => {
            assert!(cols.contains(&"x1".to_string()) && cols.contains(&"x3".to_string()), "{cols:?}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn hc3_matches_direct_formula_on_hand_data() {
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
    let noise = [0.1, -0.1, 0.2, -0.2, 0.0];
    let y: Vec<f64> = xs.iter().zip(noise).map(|(x, e)| 2.0 * x + e).collect();
    let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
    let fit = ols(&x, &y, &names(2)).unwrap();
    let cov = hc3_covariance(&x, &fit.residuals).unwrap();

    // Closed-form 2×2 inverse and leverages.
    let n = 5.0;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|v| v * v).sum();
    let det = n * sxx - sx * sx;
    let inv = [[sxx / det, -sx / det], [-sx / det, n / det]];
    let mut meat = [[0.0; 2]; 2];
    for i in 0..5 {
        let xi = [1.0, xs[i]];
        let h = xi[0] * (inv[0][0] * xi[0] + inv[0][1] * xi[1]) + xi[1] * (inv[1][0] * xi[0] + inv[1][1] * xi[1]);
        let w = fit.residuals[i].powi(2) / (1.0 - h).powi(2);
        for a in 0..2 {
            for b in 0..2 {
                meat[a][b] += w * xi[a] * xi[b];
            }
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            let mut v = 0.0;
            for c in 0..2 {
                for d in 0..2 {
                    v += inv[a][c] * meat[c][d] * inv[d][b];
                }
            }
            assert!((cov[(a, b)] - v).abs() <= 1e-12, "({a},{b}) {} vs {v}", cov[(a, b)]);
        }
    }
}

#[test]
fn hc3_close_to_classical_under_homoskedasticity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 5000;
    let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * x[(i, 1)] - 0.3 * x[(i, 2)] + rng.random_range(-1.0..1.0))
        .collect();
    let fit = ols(&x, &y, &names(3)).unwrap();
    let hc3 = hc3_covariance(&x, &fit.residuals).unwrap();
    let s2 = fit.residuals.iter().map(|e| e * e).sum::<f64>() / (n - 3) as f64;
    let classical = (x.transpose() * &x).try_inverse().unwrap() * s2;
    for j in 0..3 {
        let ratio = (hc3[(j, j)] / classical[(j, j)]).sqrt();
        assert!((ratio - 1.0).abs() < 0.1, "coef {j}: ratio {ratio}");
    }
}

#[test]
fn orthogonal_regressor_has_large_p_value() {
    let mut ps = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let half: Vec<f64> = (0..n / 2).map(|_| rng.random_range(0.0..1.0)).collect();
        // Symmetric noise, and a regressor odd where the response is even.
        let y: Vec<f64> = half.iter().chain(half.iter()).copied().collect();
        let z: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
        let fit = ols(&x, &y, &names(2)).unwrap();
        let cov = hc3_covariance(&x, &fit.residuals).unwrap();
        ps.push(p_value(fit.coef[1], cov[(1, 1)].sqrt()));
    }
    ps.sort_by(f64::total_cmp);
    assert!(ps[50] > 0.5, "median p {}", ps[50]);
}

#[test]
fn perfect_leverage_row_is_reported() {
    let n = 10;
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else if i == 4 { 1.0 } else { 0.0 });
    let y: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    let fit = ols(&x, &y, &names(2)).unwrap();
    match hc3_covariance(&x, &fit.residuals) {
        Err(Error::PerfectLeverage { row }) => assert_eq!(row, 4),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn normal_p_values() {
    assert!((normal_p_value(0.0) - 1.0).abs() < 1e-15);
    assert!((normal_p_value(1.959963984540054) - 0.05).abs() < 1e-10);
    assert!((normal_p_value(-1.959963984540054) - 0.05).abs() < 1e-10);
}

fn synthetic_fit(response: &str, coef: &[f64], p: &[f64], sd: f64) -> ResponseFit {
    let mods = ["A", "B", "C"];
    ResponseFit {
        response: response.into(),
        names: std::iter::once("const".to_string()).chain(mods.iter().map(|m| boolean_column(m))).collect(),
        coef: std::iter::once(0.0).chain(coef.iter().copied()).collect(),
        std_err: vec![1.0; 4],
        p_values: std::iter::once(1.0).chain(p.iter().copied()).collect(),
        residuals: vec![],
        response_sd: sd,
    }
}

fn abc() -> Vec<String> {
    ["A", "B", "C"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn detect_boundaries() {
    let fits = vec![
        synthetic_fit("y1", &[0.5, 0.0, 2.0], &[1.0, 1.0, 1.0], 1.0),
        synthetic_fit("y2", &[0.0, 0.0, -3.0], &[1.0, 1.0, 1.0], 1.0),
    ];
    assert!(detect(&fits, &abc(), &DetectOptions::default()).retained.is_empty());
    let all = DetectOptions {
        alpha: 1.0 + f64::EPSILON,
        floor_fraction: 0.0,
        bonferroni: false,
    };
    assert_eq!(detect(&fits, &abc(), &all).retained, vec!["A", "C"]);
}

#[test]
fn detect_applies_floor_and_alpha() {
    let fits = vec![
        synthetic_fit("y1", &[5e-4, 0.3, 2.0], &[0.01, 0.2, 0.05], 1.0),
        synthetic_fit("y2", &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 0.0),
    ];
    let grid = detect(&fits, &abc(), &DetectOptions::default());
    assert_eq!(grid.retained, vec!["C"]);
    let bonf = detect(&fits, &abc(), &DetectOptions { bonferroni: true, ..Default::default() });
    assert_eq!(bonf.alpha, 0.05);
    assert!(bonf.retained.is_empty());
    let csv = grid.retained_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap(), "response,A,B,C");
    assert_eq!(csv.lines().nth(1).unwrap(), "y1,−,−,2.000000e0");
    assert_eq!(csv.lines().nth(2).unwrap(), "y2,−,−,−");
}

fn random_problem(seed: u64, n: usize, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let y = (0..n)
        .map(|i| (0..k).map(|j| x[(i, j)] * (j as f64 - 1.0)).sum::<f64>() + rng.random_range(-1.0..1.0) * (1.0 + x[(i, 1.min(k - 1))].abs()))
        .collect();
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residuals_are_orthogonal_to_regressors(seed in any::<u64>(), n in 20usize..80, k in 1usize..6) {
        let (x, y) = random_problem(seed, n, k);
        let fit = ols(&x, &y, &names(k)).unwrap();
        let e = DVector::from_column_slice(&fit.residuals);
        let scale = DVector::from_column_slice(&y).norm();
        for j in 0..k {
            let dot = x.column(j).dot(&e);
            prop_assert!(dot.abs() <= 1e-8 * scale * x.column(j).norm());
        }
    }

    #[test]
    fn detect_is_monotone_in_alpha(
        coef in prop::collection::vec(-2.0f64..2.0, 6),
        p in prop::collection::vec(0.0f64..1.0, 6),
        a1 in 0.0f64..1.0,
        a2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let fits = vec![
            synthetic_fit("y1", &coef[..3], &p[..3], 1.0),
            synthetic_fit("y2", &coef[3..], &p[3..], 1.0),
        ];
        let small = detect(&fits, &abc(), &DetectOptions { alpha: lo, ..Default::default() });
        let large = detect(&fits, &abc(), &DetectOptions { alpha: hi, ..Default::default() });
        for m in &small.retained {
            prop_assert!(large.retained.contains(m));
        }
    }

    #[test]
    fn scaling_a_response_scales_coefficients_only(seed in any::<u64>(), c in 0.01f64..100.0) {
        let (x, y) = random_problem(seed, 60, 4);
        let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
        let base = ols(&x, &y, &names(4)).unwrap();
        let scaled = ols(&x, &yc, &names(4)).unwrap();
        let cov = hc3_covariance(&x, &base.residuals).unwrap();
        let cov_c = hc3_covariance(&x, &scaled.residuals).unwrap();
        for j in 0..4 {
            prop_assert!((scaled.coef[j] - c * base.coef[j]).abs() <= 1e-9 * c * (1.0 + base.coef[j].abs()));
            let p0 = p_value(base.coef[j], cov[(j, j)].sqrt());
            let p1 = p_value(scaled.coef[j], cov_c[(j, j)].sqrt());
            prop_assert!((p0 - p1).abs() <= 1e-9 * p0.max(1e-12));
        }
    }
}
