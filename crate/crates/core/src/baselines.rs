//! Whole-simulation baselines: one module at a time, and a Boolean DoE
//! regression on a scalar criterion with a search for the smallest module set
//! explaining the W₁ − W₀ discrepancy.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::doe::DoeDesign;
use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::mixed_dmd::{enumerate_subsets, term_name};
use crate::sim::{simulate, state_columns, DrivingCycle, VersionVector, Versions, WorkflowConfig};
use crate::table::DataTable;

/// Largest module count for the exhaustive X_opt search.
pub const XOPT_MODULE_CAP: usize = 20;
/// Step-9 validation tolerance relative to the response scale.
pub const VALIDATION_TOL: f64 = 1e-6;
/// Coefficients and residual scales below this fraction of the response
/// scale count as exactly zero.
pub const ZERO_TOL: f64 = 1e-9;
/// Backward elimination removes terms with p above this level.
pub const SELECTION_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDifference {
    pub variable: String,
    pub sum_sq: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDifference {
    pub module: String,
    pub variables: Vec<VariableDifference>,
}

impl ModuleDifference {
    pub fn total_sum_sq(&self) -> f64 {
        self.variables.iter().map(|v| v.sum_sq).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneAtATime {
    pub modules: Vec<ModuleDifference>,
    /// Every version vector simulated, reference first.
    pub simulations: Vec<VersionVector>,
}

fn single(m: usize, j: usize) -> VersionVector {
    let mut v = VersionVector::reference(m);
    v.0[j] = true;
    v
}

pub fn one_at_a_time(config: &WorkflowConfig, cycle: &DrivingCycle) -> Result<OneAtATime> {
    let m = config.module_count();
    let mut simulations = vec![VersionVector::reference(m)];
    simulations.extend((0..m).map(|j| single(m, j)));
    let tables: Vec<DataTable> = simulations
        .par_iter()
        .map(|v| simulate(config, cycle, Versions::Constant(v)))
        .collect::<Result<_>>()?;
    let names = state_columns();
    let modules = config
        .module_names()
        .into_iter()
        .zip(&tables[1..])
        .map(|(module, tj)| {
            let variables = names
                .iter()
                .map(|name| {
                    let a = tables[0].column(name)?;
                    let b = tj.column(name)?;
                    let diffs = a.iter().zip(b).map(|(x, y)| x - y);
                    Ok(VariableDifference {
                        variable: name.clone(),
                        sum_sq: diffs.clone().map(|d| d * d).sum(),
                        max_abs: diffs.fold(0.0, |acc, d| acc.max(d.abs())),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(ModuleDifference { module, variables })
        })
        .collect::<Result<_>>()?;
    Ok(OneAtATime { modules, simulations })
}

/// Scalar summary of a whole simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    FinalSoc,
    #[default]
    TotalBatteryEnergyLosses,
    TotalPropellingEnergy,
}

impl Criterion {
    pub fn column(&self) -> &'static str {
        match self {
            Criterion::FinalSoc => "B_SOC",
            Criterion::TotalBatteryEnergyLosses => "B_EnergyLosses",
            Criterion::TotalPropellingEnergy => "G_PropellingEnergy",
        }
    }

    /// Last value of the criterion's column; the energy columns accumulate.
    pub fn evaluate(&self, table: &DataTable) -> Result<f64> {
        let col = table.column(self.column())?;
        col.last()
            .copied()
            .ok_or_else(|| Error::Schema("empty table".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    /// Modules in the product; empty for the intercept.
    pub modules: Vec<String>,
    pub coefficient: f64,
    pub p_value: f64,
}

impl TermEstimate {
    pub fn name(&self) -> String {
        if self.modules.is_empty() {
            "const".into()
        } else {
            term_name(&self.modules)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityModel {
    pub criterion: Criterion,
    pub module_names: Vec<String>,
    /// Y_t = W₀(X_t) − W₀ for every design row.
    pub responses: Vec<f64>,
    /// Fit with every term up to the requested order.
    pub full_fit: Vec<TermEstimate>,
    /// Terms kept by backward elimination, intercept first.
    pub selected: Vec<TermEstimate>,
    pub fit_residual_norm: f64,
    /// W₁ − W₀ on the criterion.
    pub target: f64,
    pub x_opt: Vec<bool>,
    pub predicted_opt: f64,
    pub observed_opt: f64,
    pub validation_residual: f64,
    /// False when the validation run disagrees with the model.
    pub complete: bool,
    /// Every version vector simulated, in order.
    pub simulations: Vec<VersionVector>,
}

impl SensitivityModel {
    pub fn intercept(&self) -> f64 {
        self.selected[0].coefficient
    }

    /// Selected prediction for version vector `x`.
    pub fn predict(&self, x: &[bool]) -> f64 {
        predict(&self.selected, &self.module_names, x)
    }

    pub fn coefficients_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["term", "full_coefficient", "full_p_value", "selected", "coefficient", "p_value"])?;
        for t in &self.full_fit {
            let kept = self.selected.iter().find(|s| s.modules == t.modules);
            w.write_record([
                t.name(),
                format!("{:e}", t.coefficient),
                format!("{:e}", t.p_value),
                kept.is_some().to_string(),
                kept.map_or(String::new(), |s| format!("{:e}", s.coefficient)),
                kept.map_or(String::new(), |s| format!("{:e}", s.p_value)),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn indicator(modules: &[String], names: &[String], x: &[bool]) -> f64 {
    let on = modules
        .iter()
        .all(|m| names.iter().position(|n| n == m).is_some_and(|j| x[j]));
    on as u8 as f64
}

fn predict(terms: &[TermEstimate], names: &[String], x: &[bool]) -> f64 {
    terms
        .iter()
        .map(|t| t.coefficient * indicator(&t.modules, names, x))
        .sum()
}

/// OLS on Boolean products with classical t-test p-values. When the fit is
/// exact to `zero`, coefficients within `zero` get p = 1 and the others 0.
fn fit_terms(design: &DoeDesign, y: &[f64], terms: &[Vec<String>], zero: f64) -> Result<(Vec<TermEstimate>, f64)> {
    let n = design.nrows();
    let k = terms.len();
    let x = DMatrix::from_fn(n, k, |i, j| indicator(&terms[j], &design.module_names, &design.rows[i]));
    let names: Vec<String> = terms
        .iter()
        .map(|t| if t.is_empty() { "const".into() } else { term_name(t) })
        .collect();
    let yv = DMatrix::from_column_slice(n, 1, y);
    let coef = lstsq(&x, &yv, &names)?;
    let resid = &yv - &x * &coef;
    let rss = resid.norm_squared();
    let dof = n - k;
    let sigma = if dof > 0 { (rss / dof as f64).sqrt() } else { 0.0 };
    let p_values: Vec<f64> = if sigma > zero {
        let inv = (x.transpose() * &x)
            .try_inverse()
            .ok_or_else(|| Error::Numeric("XᵀX is singular".into()))?;
        let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Numeric(e.to_string()))?;
        (0..k)
            .map(|j| {
                let t = coef[j] / (sigma * inv[(j, j)].sqrt());
                2.0 * (1.0 - dist.cdf(t.abs()))
            })
            .collect()
    } else {
        coef.iter().map(|c| if c.abs() <= zero { 1.0 } else { 0.0 }).collect()
    };
    let estimates = terms
        .iter()
        .zip(coef.iter())
        .zip(p_values)
        .map(|((t, c), p)| TermEstimate {
            modules: t.clone(),
            coefficient: *c,
            p_value: p,
        })
        .collect();
    Ok((estimates, rss.sqrt()))
}

/// Backward elimination by largest p-value above `SELECTION_ALPHA`, refitting
/// after each removal. A term is removable only when no retained term
/// contains it; the intercept always stays.
fn backward_eliminate(design: &DoeDesign, y: &[f64], mut terms: Vec<Vec<String>>, zero: f64) -> Result<(Vec<TermEstimate>, f64)> {
    loop {
        let (fit, resid) = fit_terms(design, y, &terms, zero)?;
        let removable = |j: usize| {
            !terms[j].is_empty()
                && !terms
                    .iter()
                    .enumerate()
                    .any(|(i, t)| i != j && t.len() > terms[j].len() && terms[j].iter().all(|m| t.contains(m)))
        };
        let worst = (0..terms.len())
            .filter(|&j| removable(j) && fit[j].p_value > SELECTION_ALPHA)
            .max_by(|&a, &b| fit[a].p_value.total_cmp(&fit[b].p_value).then(b.cmp(&a)));
        match worst {
            Some(j) => {
                terms.remove(j);
            }
            None => return Ok((fit, resid)),
        }
    }
}

/// Smallest-support vector whose prediction reaches the target within `tol`
/// of the best achievable gap; ties go to the smaller gap.
fn search_x_opt(terms: &[TermEstimate], names: &[String], target: f64, tol: f64) -> Result<Vec<bool>> {
    let m = names.len();
    if m > XOPT_MODULE_CAP {
        return Err(Error::Capacity { modules: m, cap: XOPT_MODULE_CAP });
    }
    let gaps: Vec<(usize, f64)> = (0u64..1 << m)
        .map(|bits| {
            let x: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
            (bits as usize, (predict(terms, names, &x) - target).abs())
        })
        .collect();
    let best = gaps.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
    let (bits, _) = gaps
        .iter()
        .filter(|g| g.1 <= best + tol)
        .min_by(|a, b| {
            a.0.count_ones()
                .cmp(&b.0.count_ones())
                .then(a.1.total_cmp(&b.1))
                .then(a.0.cmp(&b.0))
        })
        .expect("at least one candidate");
    Ok((0..m).map(|j| bits >> j & 1 == 1).collect())
}

pub fn sensitivity_doe(
    config: &WorkflowConfig,
    cycle: &DrivingCycle,
    design: &DoeDesign,
    criterion: Criterion,
    max_interaction_order: usize,
) -> Result<SensitivityModel> {
    let m = config.module_count();
    if design.module_names != config.module_names() {
        return Err(Error::Config("design modules differ from workflow modules".into()));
    }
    let run = |v: &VersionVector| simulate(config, cycle, Versions::Constant(v)).and_then(|t| criterion.evaluate(&t));

    let reference = VersionVector::reference(m);
    let updated = VersionVector::updated(m);
    let mut simulations = vec![reference.clone(), updated.clone()];
    simulations.extend((0..design.nrows()).map(|i| design.row_vector(i)));
    let values: Vec<f64> = simulations.par_iter().map(run).collect::<Result<_>>()?;
    let w0 = values[0];
    let target = values[1] - w0;
    let responses: Vec<f64> = values[2..].iter().map(|v| v - w0).collect();

    let scale = responses.iter().chain([&target]).fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let zero = ZERO_TOL * scale;

    let mut terms = vec![Vec::new()];
    terms.extend(enumerate_subsets(&design.module_names, max_interaction_order.min(m), true)?);
    let (full_fit, _) = fit_terms(design, &responses, &terms, zero)?;
    let (selected, fit_residual_norm) = backward_eliminate(design, &responses, terms, zero)?;

    let x_opt = search_x_opt(&selected, &design.module_names, target, VALIDATION_TOL * scale)?;
    let predicted_opt = predict(&selected, &design.module_names, &x_opt);
    let opt_vector = VersionVector(x_opt.clone());
    let observed_opt = run(&opt_vector)? - w0;
    simulations.push(opt_vector);
    let validation_residual = (observed_opt - predicted_opt).abs();
    let complete = validation_residual <= VALIDATION_TOL * scale;
    if !complete {
        log::warn!("model incomplete: validation residual {validation_residual:e} exceeds tolerance");
    }
    Ok(SensitivityModel {
        criterion,
        module_names: design.module_names.clone(),
        responses,
        full_fit,
        selected,
        fit_residual_norm,
        target,
        x_opt,
        predicted_opt,
        observed_opt,
        validation_residual,
        complete,
        simulations,
    })
}
