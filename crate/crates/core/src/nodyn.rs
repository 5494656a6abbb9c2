//! Two-simulation detection: replay every row of the scheduled run one step
//! with reference versions, then regress the deviation on the module flags.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::doe::Schedule;
use crate::error::{Error, Result};
use crate::linalg::{lstsq, std_dev, RANK_TOL};
use crate::sim::{
    boolean_column, internal_columns, one_step_from, state_columns, DrivingCycle, VersionVector,
    WorkflowConfig,
};
use crate::table::{ColumnKind, DataTable};

/// Row `t` holds the reference-version successor of row `t` of `t0doe`;
/// `n − 1` rows.
pub fn build_oracle(t0doe: &DataTable, config: &WorkflowConfig, cycle: &DrivingCycle) -> Result<DataTable> {
    let n = t0doe.nrows();
    if cycle.len() != n {
        return Err(Error::Schema(format!("cycle has {} steps, table has {n} rows", cycle.len())));
    }
    if n < 2 {
        return Err(Error::Schema("need at least two rows".into()));
    }
    let reference = VersionVector::reference(config.module_count());
    let rows: Vec<[f64; 16]> = (0..n - 1)
        .into_par_iter()
        .map(|t| {
            one_step_from(t0doe, t, cycle.speed_setpoint[t], &reference, config)
                .map(|s| s.to_array())
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = state_columns().into_iter().chain(internal_columns()).collect();
    let columns = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| (name, rows.iter().map(|r| r[k]).collect()))
        .collect();
    DataTable::from_columns((0..n - 1).collect(), columns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LagMode {
    /// No lagged responses.
    None,
    /// Each response is regressed on its own lag only.
    Own,
    /// Every lagged response enters every regression; lags that are linear
    /// combinations of earlier ones are dropped.
    #[default]
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub interaction_order: usize,
    pub include_imposed_deltas: bool,
    pub include_cross_terms: bool,
    pub lag_mode: LagMode,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            interaction_order: 2,
            include_imposed_deltas: true,
            include_cross_terms: false,
            lag_mode: LagMode::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressorGroup {
    Intercept,
    Imposed,
    ImposedDelta,
    Boolean,
    Cross,
    Lag,
}

#[derive(Debug, Clone)]
pub struct RegressionDataset {
    pub module_names: Vec<String>,
    pub response_names: Vec<String>,
    /// rows × responses: deviation at t + 1.
    pub responses: DMatrix<f64>,
    /// Shared regressors (everything but lags).
    pub regressor_names: Vec<String>,
    pub groups: Vec<RegressorGroup>,
    pub regressors: DMatrix<f64>,
    /// rows × responses: deviation at t.
    pub lags: DMatrix<f64>,
    pub lag_mode: LagMode,
    /// Lags entering every regression under [`LagMode::All`].
    pub shared_lags: Vec<usize>,
    /// Source step `t` of every row.
    pub rows: Vec<usize>,
}

pub fn lag_name(response: &str) -> String {
    format!("lag_{response}")
}

fn interaction_name(cols: &[String]) -> String {
    cols.join(":")
}

fn subsets_up_to(m: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for k in 1..=order.min(m) {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.clone());
            let Some(i) = (0..k).rev().find(|&i| idx[i] != i + m - k) else { break };
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// Assemble responses and regressors over steps `1..=n−2`, skipping steps
/// whose successor starts a new segment.
pub fn build_dataset(
    t0doe: &DataTable,
    t0star: &DataTable,
    schedule: &Schedule,
    options: &DatasetOptions,
) -> Result<RegressionDataset> {
    let n = t0doe.nrows();
    if t0star.nrows() + 1 != n || schedule.len() != n {
        return Err(Error::Schema(format!(
            "misaligned inputs: table {n} rows, oracle {} rows, schedule {} steps",
            t0star.nrows(),
            schedule.len()
        )));
    }
    if options.interaction_order == 0 {
        return Err(Error::Config("interaction_order must be >= 1".into()));
    }
    let response_names = state_columns();
    t0doe.require(&response_names)?;
    t0star.require(&response_names)?;
    let doe_m = t0doe.matrix_of(&response_names)?;
    let star_m = t0star.matrix_of(&response_names)?;
    let deviation = |t: usize, i: usize| doe_m[(t, i)] - star_m[(t - 1, i)];

    let imposed: Vec<String> = t0doe
        .names()
        .iter()
        .zip(t0doe.kinds())
        .filter(|(_, k)| **k == ColumnKind::Imposed)
        .map(|(n, _)| n.clone())
        .collect();
    let modules = schedule.module_names.clone();
    let flag_names: Vec<String> = modules.iter().map(|m| boolean_column(m)).collect();
    let combos = subsets_up_to(modules.len(), options.interaction_order);

    let mut names = vec!["const".to_string()];
    let mut groups = vec![RegressorGroup::Intercept];
    for c in &imposed {
        names.push(c.clone());
        groups.push(RegressorGroup::Imposed);
    }
    if options.include_imposed_deltas {
        for c in &imposed {
            names.push(format!("d_{c}"));
            groups.push(RegressorGroup::ImposedDelta);
        }
    }
    for combo in &combos {
        let cols: Vec<String> = combo.iter().map(|&j| flag_names[j].clone()).collect();
        names.push(interaction_name(&cols));
        groups.push(RegressorGroup::Boolean);
    }
    if options.include_cross_terms {
        for c in &imposed {
            for f in &flag_names {
                names.push(format!("{c}:{f}"));
                groups.push(RegressorGroup::Cross);
            }
        }
    }

    let rows: Vec<usize> = (1..n.saturating_sub(1)).filter(|&t| !schedule.is_boundary(t + 1)).collect();
    let imposed_cols: Vec<&[f64]> = imposed.iter().map(|c| t0doe.column(c)).collect::<Result<_>>()?;
    let p = response_names.len();
    let mut x = DMatrix::zeros(rows.len(), names.len());
    let mut y = DMatrix::zeros(rows.len(), p);
    let mut lags = DMatrix::zeros(rows.len(), p);
    for (r, &t) in rows.iter().enumerate() {
        let mut c = 0;
        let mut put = |v: f64| {
            x[(r, c)] = v;
            c += 1;
        };
        put(1.0);
        for col in &imposed_cols {
            put(col[t]);
        }
        if options.include_imposed_deltas {
            for col in &imposed_cols {
                put(col[t] - col[t - 1]);
            }
        }
        for combo in &combos {
            put(combo.iter().map(|&j| schedule.flag(t, j)).product());
        }
        if options.include_cross_terms {
            for col in &imposed_cols {
                for j in 0..modules.len() {
                    put(col[t] * schedule.flag(t, j));
                }
            }
        }
        for i in 0..p {
            y[(r, i)] = deviation(t + 1, i);
            lags[(r, i)] = deviation(t, i);
        }
    }
    let shared_lags = match options.lag_mode {
        LagMode::All => independent_lags(&x, &lags),
        _ => Vec::new(),
    };
    Ok(RegressionDataset {
        module_names: modules,
        response_names,
        responses: y,
        regressor_names: names,
        groups,
        regressors: x,
        lags,
        lag_mode: options.lag_mode,
        shared_lags,
        rows,
    })
}

impl RegressionDataset {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// Design matrix and column names used for response `i`.
    pub fn design_for(&self, i: usize) -> (DMatrix<f64>, Vec<String>) {
        let lag_cols: Vec<usize> = match self.lag_mode {
            LagMode::None => vec![],
            LagMode::Own => {
                if self.lags.column(i).iter().any(|v| *v != 0.0) {
                    vec![i]
                } else {
                    vec![]
                }
            }
            LagMode::All => self.shared_lags.clone(),
        };
        let k = self.regressors.ncols();
        let mut x = DMatrix::zeros(self.nrows(), k + lag_cols.len());
        x.columns_mut(0, k).copy_from(&self.regressors);
        let mut names = self.regressor_names.clone();
        for (c, &j) in lag_cols.iter().enumerate() {
            x.column_mut(k + c).copy_from(&self.lags.column(j));
            names.push(lag_name(&self.response_names[j]));
        }
        (x, names)
    }
}

/// Leverage at or above `1 − LEVERAGE_SCREEN_TOL` makes a lag unusable: it
/// only fits one row exactly.
const LEVERAGE_SCREEN_TOL: f64 = 1e-8;

/// Lags that extend the column space of the shared regressors, in response
/// order, skipping those dependent on earlier ones or isolating a single row.
fn independent_lags(regressors: &DMatrix<f64>, lags: &DMatrix<f64>) -> Vec<usize> {
    let mut basis = regressors.clone();
    let mut keep = Vec::new();
    for j in 0..lags.ncols() {
        let col = lags.column(j);
        if col.iter().all(|v| *v == 0.0) {
            continue;
        }
        let mut trial = basis.clone().insert_column(basis.ncols(), 0.0);
        let last = trial.ncols() - 1;
        trial.column_mut(last).copy_from(&col);
        if full_rank(&trial, RANK_TOL) && max_leverage(&trial) < 1.0 - LEVERAGE_SCREEN_TOL {
            basis = trial;
            keep.push(j);
        }
    }
    keep
}

fn max_leverage(x: &DMatrix<f64>) -> f64 {
    let q = x.clone().qr().q();
    q.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max)
}

fn full_rank(x: &DMatrix<f64>, tol: f64) -> bool {
    let mut scaled = x.clone();
    for mut c in scaled.column_iter_mut() {
        let n = c.norm();
        if n == 0.0 {
            return false;
        }
        c /= n;
    }
    let qr = scaled.col_piv_qr();
    let r = qr.r();
    let r00 = r[(0, 0)].abs();
    (0..r.ncols().min(r.nrows())).all(|i| r[(i, i)].abs() > tol * r00) && x.nrows() >= x.ncols()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
}

pub fn ols(x: &DMatrix<f64>, y: &[f64], names: &[String]) -> Result<OlsFit> {
    let yv = DMatrix::from_column_slice(y.len(), 1, y);
    let coef = lstsq(x, &yv, names)?;
    let fitted = x * &coef;
    Ok(OlsFit {
        names: names.to_vec(),
        coef: coef.iter().copied().collect(),
        residuals: y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect(),
    })
}

/// Heteroskedasticity-consistent (HC3) covariance of OLS coefficients.
pub fn hc3_covariance(x: &DMatrix<f64>, residuals: &[f64]) -> Result<DMatrix<f64>> {
    let k = x.ncols();
    let xtx_inv = (x.transpose() * x)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("XᵀX is singular".into()))?;
    // Leverages from the thin QR factor are better conditioned than xᵢᵀ(XᵀX)⁻¹xᵢ.
    let q = x.clone().qr().q();
    let mut meat = DMatrix::zeros(k, k);
    for (i, e) in residuals.iter().enumerate() {
        let h = q.row(i).norm_squared();
        if h >= 1.0 - 1e-12 {
            return Err(Error::PerfectLeverage { row: i });
        }
        let w = e * e / ((1.0 - h) * (1.0 - h));
        if w != 0.0 {
            let xi = x.row(i);
            meat.ger(w, &xi.transpose(), &xi.transpose(), 1.0);
        }
    }
    Ok(&xtx_inv * meat * &xtx_inv)
}

/// Two-sided p-value of a z statistic under the standard normal.
pub fn normal_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

fn p_value(coef: f64, se: f64) -> f64 {
    if se > 0.0 {
        normal_p_value(coef / se)
    } else if coef != 0.0 {
        0.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFit {
    pub response: String,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub std_err: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Standard deviation of the response column.
    pub response_sd: f64,
}

impl ResponseFit {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// OLS with HC3 p-values for every response, in parallel.
pub fn fit_dataset(ds: &RegressionDataset) -> Result<Vec<ResponseFit>> {
    (0..ds.response_names.len())
        .into_par_iter()
        .map(|i| {
            let (x, names) = ds.design_for(i);
            let y: Vec<f64> = ds.responses.column(i).iter().copied().collect();
            let fit = ols(&x, &y, &names)?;
            let cov = hc3_covariance(&x, &fit.residuals)?;
            let std_err: Vec<f64> = (0..names.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
            let p_values = fit.coef.iter().zip(&std_err).map(|(c, s)| p_value(*c, *s)).collect();
            Ok(ResponseFit {
                response: ds.response_names[i].clone(),
                names,
                coef: fit.coef,
                std_err,
                p_values,
                residuals: fit.residuals,
                response_sd: std_dev(&y),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub alpha: f64,
    /// Cell floor as a fraction of the response's standard deviation.
    pub floor_fraction: f64,
    /// Divide alpha by the number of responses.
    pub bonferroni: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            alpha: 0.1,
            floor_fraction: 1e-3,
            bonferroni: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionGrid {
    pub responses: Vec<String>,
    pub modules: Vec<String>,
    /// responses × modules main-effect coefficients.
    pub coef: Vec<Vec<f64>>,
    pub p_values: Vec<Vec<f64>>,
    pub floors: Vec<f64>,
    pub retained_cells: Vec<Vec<bool>>,
    pub retained: Vec<String>,
    pub alpha: f64,
}

pub fn detect(fits: &[ResponseFit], modules: &[String], options: &DetectOptions) -> DetectionGrid {
    let alpha = if options.bonferroni {
        options.alpha / fits.len().max(1) as f64
    } else {
        options.alpha
    };
    let mut coef = Vec::with_capacity(fits.len());
    let mut p_values = Vec::with_capacity(fits.len());
    let mut cells = Vec::with_capacity(fits.len());
    let mut floors = Vec::with_capacity(fits.len());
    for f in fits {
        let floor = options.floor_fraction * f.response_sd;
        let mut c_row = Vec::new();
        let mut p_row = Vec::new();
        let mut r_row = Vec::new();
        for m in modules {
            let (c, p) = match f.index_of(&boolean_column(m)) {
                Some(j) => (f.coef[j], f.p_values[j]),
                None => (0.0, 1.0),
            };
            c_row.push(c);
            p_row.push(p);
            r_row.push(p < alpha && c.abs() > floor);
        }
        coef.push(c_row);
        p_values.push(p_row);
        cells.push(r_row);
        floors.push(floor);
    }
    let retained = modules
        .iter()
        .enumerate()
        .filter(|(j, _)| cells.iter().any(|row| row[*j]))
        .map(|(_, m)| m.clone())
        .collect();
    DetectionGrid {
        responses: fits.iter().map(|f| f.response.clone()).collect(),
        modules: modules.to_vec(),
        coef,
        p_values,
        floors,
        retained_cells: cells,
        retained,
        alpha,
    }
}

impl DetectionGrid {
    fn grid_csv(&self, cell: impl Fn(usize, usize) -> String) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["response".to_string()];
        header.extend(self.modules.iter().cloned());
        w.write_record(&header)?;
        for (i, r) in self.responses.iter().enumerate() {
            let mut rec = vec![r.clone()];
            rec.extend((0..self.modules.len()).map(|j| cell(i, j)));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn coefficients_csv(&self) -> Result<String> {
        self.grid_csv(|i, j| format!("{:.6e}", self.coef[i][j]))
    }

    pub fn p_values_csv(&self) -> Result<String> {
        self.grid_csv(|i, j| format!("{:.6e}", self.p_values[i][j]))
    }

    /// Retained coefficients; every other cell is "−".
    pub fn retained_csv(&self) -> Result<String> {
        self.grid_csv(|i, j| {
            if self.retained_cells[i][j] {
                format!("{:.6e}", self.coef[i][j])
            } else {
                "−".to_string()
            }
        })
    }
}

/// Full pipeline: oracle, dataset, fits, detection.
pub fn run(
    t0doe: &DataTable,
    schedule: &Schedule,
    config: &WorkflowConfig,
    cycle: &DrivingCycle,
    dataset_options: &DatasetOptions,
    detect_options: &DetectOptions,
) -> Result<(DetectionGrid, Vec<ResponseFit>)> {
    let star = build_oracle(t0doe, config, cycle)?;
    let ds = build_dataset(t0doe, &star, schedule, dataset_options)?;
    let fits = fit_dataset(&ds)?;
    let grid = detect(&fits, &ds.module_names, detect_options);
    Ok((grid, fits))
}

#[cfg(test)]
mod tests;
