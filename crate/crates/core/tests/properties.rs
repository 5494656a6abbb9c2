use std::collections::HashMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use switchdetect::baselines::{sensitivity_doe, Criterion};
use switchdetect::dmd::{fit_dmdc, prune_variables, DmdcOptions};
use switchdetect::doe::{make_schedule, DoeDesign, Ordering};
use switchdetect::linalg::spectral_radius;
use switchdetect::sim::{
    simulate, state_from_row, step, DrivingCycle, Perturbation, VersionVector, Versions, WorkflowConfig,
    BATTERY,
};
use switchdetect::{ColumnKind, DataTable};

fn names(m: usize) -> Vec<String> {
    ["Battery", "Motor", "Driveline", "Glider", "E", "F"][..m]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn test_case() -> WorkflowConfig {
    WorkflowConfig::test_case()
}

fn reference_run(cycle: &DrivingCycle) -> DataTable {
    let w = test_case();
    simulate(&w, cycle, Versions::Constant(&VersionVector::reference(w.module_count()))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>()) {
        let w = test_case();
        let cycle = DrivingCycle::random(800, w.dt, seed);
        let design = DoeDesign::full_factorial(&w.module_names()).unwrap();
        let schedule = make_schedule(&design, 800, 20, Ordering::Random, seed).unwrap();
        let a = simulate(&w, &cycle, Versions::PerStep(schedule.steps())).unwrap();
        let b = simulate(&w, &cycle, Versions::PerStep(schedule.steps())).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn energy_bookkeeping_and_soc_bounds(seed in any::<u64>()) {
        let w = test_case();
        let t = reference_run(&DrivingCycle::random(1500, w.dt, seed));
        let propel = t.column("G_PropellingEnergy").unwrap();
        let brake = t.column("G_BrakingEnergy").unwrap();
        let power = t.column("G_TractivePower").unwrap();
        let soc = t.column("B_SOC").unwrap();
        for i in 1..t.nrows() {
            let scale = 1.0 + propel[i].abs() + brake[i].abs();
            prop_assert!((propel[i] - propel[i - 1] - power[i].max(0.0) * w.dt).abs() <= 1e-9 * scale);
            prop_assert!((brake[i] - brake[i - 1] - (-power[i]).max(0.0) * w.dt).abs() <= 1e-9 * scale);
            prop_assert!(soc[i] <= soc[i - 1]);
            prop_assert!((0.0..=1.0).contains(&soc[i]));
        }
    }

    #[test]
    fn all_reference_segments_follow_pure_reference(seed in any::<u64>()) {
        let w = test_case();
        let m = w.module_count();
        let n = 600;
        let cycle = DrivingCycle::random(n, w.dt, seed);
        let design = DoeDesign::full_factorial(&w.module_names()).unwrap();
        let schedule = make_schedule(&design, n, 20, Ordering::Random, seed).unwrap();
        let table = simulate(&w, &cycle, Versions::PerStep(schedule.steps())).unwrap();
        let reference = VersionVector::reference(m);
        let mut checked = 0;
        for seg in 0..schedule.segment_count() {
            let start = seg * schedule.segment_length;
            if schedule.steps()[start] != reference {
                continue;
            }
            let end = (start + schedule.segment_length).min(n - 1);
            let mut state = state_from_row(&table, start).unwrap();
            for t in start..end {
                state = step(&state, cycle.speed_setpoint[t], &reference, &w).unwrap();
                prop_assert_eq!(state, state_from_row(&table, t + 1).unwrap());
            }
            checked += 1;
        }
        prop_assert!(checked > 0);
    }

    #[test]
    fn higher_battery_resistance_raises_losses(delta in 0.01f64..1.0) {
        let base = test_case();
        let cycle = DrivingCycle::default_cycle();
        let w = base.build_w1(&[Perturbation::new(BATTERY, "internal_resistance", delta)]).unwrap();
        let m = w.module_count();
        let run = |v: &VersionVector| {
            let t = simulate(&w, &cycle, Versions::Constant(v)).unwrap();
            *t.column("B_EnergyLosses").unwrap().last().unwrap()
        };
        let mut battery = VersionVector::reference(m);
        battery.0[0] = true;
        prop_assert!(run(&battery) > run(&VersionVector::reference(m)));
    }

    #[test]
    fn sequential_coverage_is_balanced(m in 1usize..=5, seg in 1usize..30, n in 1usize..3000) {
        let design = DoeDesign::full_factorial(&names(m)).unwrap();
        let s = make_schedule(&design, n, seg, Ordering::Sequential, 0).unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for row in &s.segment_rows {
            *counts.entry(*row).or_default() += 1;
        }
        let hi = (0..design.nrows()).map(|r| counts.get(&r).copied().unwrap_or(0)).max().unwrap();
        let lo = (0..design.nrows()).map(|r| counts.get(&r).copied().unwrap_or(0)).min().unwrap();
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn schedules_are_reproducible_and_use_design_rows(m in 1usize..=5, seed in any::<u64>(), n in 1usize..2000) {
        let design = DoeDesign::full_factorial(&names(m)).unwrap();
        let a = make_schedule(&design, n, 20, Ordering::Random, seed).unwrap();
        let b = make_schedule(&design, n, 20, Ordering::Random, seed).unwrap();
        prop_assert_eq!(a.steps(), b.steps());
        prop_assert_eq!(a.len(), n);
        let rows: Vec<VersionVector> = (0..design.nrows()).map(|i| design.row_vector(i)).collect();
        for v in a.steps() {
            prop_assert!(rows.contains(v));
        }
    }

    #[test]
    fn full_factorial_is_balanced_and_complement_involutive(m in 1usize..=6) {
        let design = DoeDesign::full_factorial(&names(m)).unwrap();
        prop_assert_eq!(design.nrows(), 1 << m);
        for j in 0..m {
            let ones = design.rows.iter().filter(|r| r[j]).count();
            prop_assert_eq!(ones, design.nrows() / 2);
        }
        let co = design.complement();
        for (r, c) in design.rows.iter().zip(&co.rows) {
            prop_assert!(r.iter().zip(c).all(|(a, b)| a != b));
        }
        prop_assert_eq!(co.complement(), design);
    }

    #[test]
    fn spectral_radius_is_absolutely_homogeneous(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let lhs = spectral_radius(&(&a * c)).unwrap();
        let rhs = c.abs() * spectral_radius(&a).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
    }
}

#[test]
fn dmdc_fit_is_a_least_squares_minimum() {
    let t = reference_run(&DrivingCycle::random(1500, 0.1, 3));
    let states = prune_variables(&t, 0.98).unwrap();
    let controls = vec!["speed_setpoint".to_string()];
    let fit = fit_dmdc(&[&t], &states, &controls, DmdcOptions::default()).unwrap();
    let p = states.len();
    let x = t.matrix_of(&states).unwrap();
    let u = t.matrix_of(&controls).unwrap();
    let rss = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let mut total = 0.0;
        for r in 0..t.nrows() - 1 {
            let pred = a * x.row(r).transpose() + b * u.row(r).transpose();
            total += (x.row(r + 1).transpose() - pred).norm_squared();
        }
        total
    };
    let base = rss(&fit.model.a, &fit.model.b);
    for i in 0..p {
        for j in 0..p + 1 {
            for h in [1e-4, -1e-4] {
                let (mut a, mut b) = (fit.model.a.clone(), fit.model.b.clone());
                if j < p {
                    a[(i, j)] += h;
                } else {
                    b[(i, 0)] += h;
                }
                assert!(rss(&a, &b) >= base * (1.0 - 1e-12), "entry ({i},{j}) step {h}");
            }
        }
    }
}

#[test]
fn pruning_is_idempotent() {
    for seed in 0..5 {
        let t = reference_run(&DrivingCycle::random(1000, 0.1, seed));
        for threshold in [0.9, 0.98, 1.0] {
            let kept = prune_variables(&t, threshold).unwrap();
            let again = prune_variables(&t.select(&kept).unwrap(), threshold).unwrap();
            assert_eq!(kept, again);
            assert!(kept.iter().all(|c| t.kind_of(c) == Some(ColumnKind::State)));
        }
    }
}

#[test]
fn dropping_null_terms_keeps_remaining_coefficients() {
    let base = test_case();
    let w = base.build_w1(&switchdetect::sim::default_perturbations()).unwrap();
    let cycle = DrivingCycle::random(1500, w.dt, 11);
    let design = DoeDesign::full_factorial(&w.module_names()).unwrap();
    let model = sensitivity_doe(&w, &cycle, &design, Criterion::TotalBatteryEnergyLosses, 4).unwrap();
    let scale = model.responses.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for term in &model.selected {
        let full = model.full_fit.iter().find(|t| t.modules == term.modules).unwrap();
        assert!(
            (full.coefficient - term.coefficient).abs() <= 1e-6 * scale,
            "{}: {} vs {}",
            term.name(),
            full.coefficient,
            term.coefficient
        );
    }
}
