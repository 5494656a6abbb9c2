//! Reference-dynamics identification with control inputs: least-squares fit
//! of `x_{t+1} = A x_t + B u_t`, spectral diagnostics, rollout, quality
//! series and correlation-based variable pruning.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, lstsq, pearson, r_squared, rows_of};
use crate::table::{ColumnKind, DataTable};

pub const DEFAULT_CORR_THRESHOLD: f64 = 0.98;

/// Identified linear dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// p × p internal dynamics.
    pub a: DMatrix<f64>,
    /// p × c control influence.
    pub b: DMatrix<f64>,
    pub state_cols: Vec<String>,
    pub control_cols: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LinearModelDoc {
    state_cols: Vec<String>,
    control_cols: Vec<String>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        state_cols: Vec<String>,
        control_cols: Vec<String>,
    ) -> Result<Self> {
        let p = state_cols.len();
        if a.shape() != (p, p) || b.shape() != (p, control_cols.len()) {
            return Err(Error::Schema(format!(
                "A is {:?} and B is {:?} for {p} states and {} controls",
                a.shape(),
                b.shape(),
                control_cols.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model has non-finite entries".into()));
        }
        Ok(LinearModel {
            a,
            b,
            state_cols,
            control_cols,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LinearModelDoc {
            state_cols: self.state_cols.clone(),
            control_cols: self.control_cols.clone(),
            a: rows_of(&self.a),
            b: rows_of(&self.b),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LinearModelDoc = serde_json::from_str(text)?;
        let p = doc.state_cols.len();
        let a = linalg::from_rows(&doc.a, p)?;
        let b = linalg::from_rows(&doc.b, doc.control_cols.len())?;
        if doc.a.len() != p || doc.b.len() != p {
            return Err(Error::Schema("matrix row count differs from state count".into()));
        }
        LinearModel::new(a, b, doc.state_cols, doc.control_cols)
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        linalg::spectral_radius(&self.a)
    }

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DmdcOptions {
    /// Fit on columns divided by their standard deviation, then map the
    /// matrices back to original units.
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdcFit {
    pub model: LinearModel,
    /// One-step-ahead R² per state variable on the fitted transitions.
    pub r2: Vec<f64>,
}

/// Non-constant state columns, greedily thinned so no remaining pair has an
/// absolute Pearson correlation at or above `threshold`.
///
/// From the most correlated pair, the member with the higher mean absolute
/// correlation to the other retained columns is dropped (the later column on
/// ties).
pub fn prune_variables(table: &DataTable, threshold: f64) -> Result<Vec<String>> {
    prune_columns(table, &table.names_of(ColumnKind::State), threshold)
}

pub fn prune_columns(table: &DataTable, columns: &[String], threshold: f64) -> Result<Vec<String>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("correlation threshold {threshold} outside (0, 1]")));
    }
    if table.nrows() < 2 {
        return Err(Error::Config("pruning needs at least two rows".into()));
    }
    let mut keep: Vec<String> = Vec::new();
    for name in columns {
        let col = table.column(name)?;
        if col.iter().any(|v| *v != col[0]) {
            keep.push(name.clone());
        }
    }
    let k = keep.len();
    let mut corr = DMatrix::<f64>::identity(k, k);
    for i in 0..k {
        for j in i + 1..k {
            let c = pearson(table.column(&keep[i])?, table.column(&keep[j])?).abs();
            corr[(i, j)] = c;
            corr[(j, i)] = c;
        }
    }
    let mut alive: Vec<usize> = (0..k).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (a, &i) in alive.iter().enumerate() {
            for &j in &alive[a + 1..] {
                if best.is_none_or(|(_, _, c)| corr[(i, j)] > c) {
                    best = Some((i, j, corr[(i, j)]));
                }
            }
        }
        let Some((i, j, c)) = best else { break };
        if c < threshold - 1e-12 {
            break;
        }
        let mean_corr = |x: usize| {
            let others: Vec<f64> = alive.iter().filter(|&&o| o != x).map(|&o| corr[(x, o)]).collect();
            linalg::mean(&others)
        };
        let drop = if mean_corr(i) > mean_corr(j) { i } else { j };
        alive.retain(|&x| x != drop);
    }
    Ok(alive.into_iter().map(|i| keep[i].clone()).collect())
}

/// Stack transition pairs `(z_t, x_{t+1})` from each table; pairs never span
/// two tables.
pub(crate) fn transition_pairs(
    tables: &[&DataTable],
    regressors: &[String],
    targets: &[String],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let total: usize = tables.iter().map(|t| t.nrows().saturating_sub(1)).sum();
    let mut z = DMatrix::zeros(total, regressors.len());
    let mut y = DMatrix::zeros(total, targets.len());
    let mut offset = 0;
    for table in tables {
        let n = table.nrows();
        if n < 2 {
            continue;
        }
        let zm = table.matrix_of(regressors)?;
        let ym = table.matrix_of(targets)?;
        z.rows_mut(offset, n - 1).copy_from(&zm.rows(0, n - 1));
        y.rows_mut(offset, n - 1).copy_from(&ym.rows(1, n - 1));
        offset += n - 1;
    }
    Ok((z, y))
}

/// Least-squares DMDc fit over every transition of the given tables.
pub fn fit_dmdc(
    tables: &[&DataTable],
    state_cols: &[String],
    control_cols: &[String],
    options: DmdcOptions,
) -> Result<DmdcFit> {
    let p = state_cols.len();
    let c = control_cols.len();
    let regressors: Vec<String> = state_cols.iter().chain(control_cols).cloned().collect();
    let (mut z, mut y) = transition_pairs(tables, &regressors, state_cols)?;
    if z.nrows() < p + c + 1 {
        return Err(Error::Config(format!(
            "{} transitions for {} regressors; need at least {}",
            z.nrows(),
            p + c,
            p + c + 1
        )));
    }
    let scales: Vec<f64> = if options.standardize {
        (0..p + c)
            .map(|j| {
                let s = linalg::std_dev(z.column(j).as_slice());
                if s > 0.0 { s } else { 1.0 }
            })
            .collect()
    } else {
        vec![1.0; p + c]
    };
    for j in 0..p + c {
        z.column_mut(j).scale_mut(1.0 / scales[j]);
    }
    for i in 0..p {
        y.column_mut(i).scale_mut(1.0 / scales[i]);
    }
    let coef = lstsq(&z, &y, &regressors)?;
    // coef is (p + c) × p in scaled units: y_i/s_i = Σ_j coef[j,i] z_j/s_j.
    let full = DMatrix::from_fn(p, p + c, |i, j| coef[(j, i)] * scales[i] / scales[j]);
    let a = full.columns(0, p).into_owned();
    let b = full.columns(p, c).into_owned();
    let model = LinearModel::new(a, b, state_cols.to_vec(), control_cols.to_vec())?;

    let mut truth: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); p];
    for table in tables {
        let q = one_step_series(table, &model)?;
        for i in 0..p {
            truth[i].extend_from_slice(&q.0[i]);
            pred[i].extend_from_slice(&q.1[i]);
        }
    }
    let r2 = (0..p).map(|i| r_squared(&truth[i], &pred[i])).collect();
    Ok(DmdcFit { model, r2 })
}

/// (truth, prediction) per state for every transition of `table`.
fn one_step_series(table: &DataTable, model: &LinearModel) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let p = model.state_cols.len();
    let xs = table.matrix_of(&model.state_cols)?;
    let us = table.matrix_of(&model.control_cols)?;
    let n = table.nrows();
    let mut truth = vec![Vec::with_capacity(n); p];
    let mut pred = vec![Vec::with_capacity(n); p];
    for t in 0..n.saturating_sub(1) {
        let x = xs.row(t).transpose();
        let u = us.row(t).transpose();
        let next = model.predict(&x, &u);
        for i in 0..p {
            truth[i].push(xs[(t + 1, i)]);
            pred[i].push(next[i]);
        }
    }
    Ok((truth, pred))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    linalg::spectral_radius(a)
}

/// Free-run the model from `x0` under `controls` (one control row per step).
/// The returned table has `controls.nrows() + 1` rows starting with `x0`.
pub fn rollout(model: &LinearModel, x0: &[f64], controls: &DMatrix<f64>) -> Result<DataTable> {
    let p = model.state_cols.len();
    if x0.len() != p || controls.ncols() != model.control_cols.len() {
        return Err(Error::Schema("rollout inputs do not match the model".into()));
    }
    let horizon = controls.nrows();
    let mut states = DMatrix::zeros(horizon + 1, p);
    let mut x = DVector::from_column_slice(x0);
    states.row_mut(0).copy_from(&x.transpose());
    for t in 0..horizon {
        x = model.predict(&x, &controls.row(t).transpose());
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                variable: model.state_cols[i].clone(),
                step: t + 1,
            });
        }
        states.row_mut(t + 1).copy_from(&x.transpose());
    }
    let columns = model
        .state_cols
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), states.column(i).iter().copied().collect()))
        .collect();
    DataTable::from_columns_with_kinds(
        (0..=horizon).collect(),
        columns,
        vec![ColumnKind::State; p],
    )
}

/// Data behind the standard quality plots for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableQuality {
    pub variable: String,
    pub r2: f64,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Residual plus the response mean.
    pub residual_plus_mean: Vec<f64>,
}

/// One-step-ahead quality of `model` on `table`, in original units.
pub fn quality(table: &DataTable, model: &LinearModel) -> Result<Vec<VariableQuality>> {
    let (truth, pred) = one_step_series(table, model)?;
    Ok(model
        .state_cols
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let m = linalg::mean(&truth[i]);
            VariableQuality {
                variable: name.clone(),
                r2: r_squared(&truth[i], &pred[i]),
                residual_plus_mean: truth[i].iter().zip(&pred[i]).map(|(y, p)| y - p + m).collect(),
                truth: truth[i].clone(),
                predicted: pred[i].clone(),
            }
        })
        .collect())
}

/// Long-format CSV of quality series: variable, index, truth, predicted,
/// residual_plus_mean.
pub fn quality_csv(series: &[VariableQuality]) -> String {
    let mut out = String::from("variable,index,truth,predicted,residual_plus_mean\n");
    for q in series {
        for k in 0..q.truth.len() {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?}\n",
                q.variable, k, q.truth[k], q.predicted[k], q.residual_plus_mean[k]
            ));
        }
    }
    out
}
