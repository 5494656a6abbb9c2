//! Per-subset sparse identification of module-activated corrections to a
//! linear transition model, and ranking of candidate subsets by penalized
//! objective.

mod solver;

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use solver::{solve, PenalizedProblem, PenalizedSolution, ResidualNorm, SolverOptions};

use crate::dmd::transition_pairs;
use crate::doe::Schedule;
use crate::error::{Error, Result};
use crate::linalg::{l1_norm, spectral_radius};
use crate::sim::boolean_column;
use crate::table::DataTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyWeights {
    pub p_eps: f64,
    pub p_a: f64,
    /// Weight per term order; `p_term[0]` is for single modules, `p_term[1]`
    /// for pairs, and so on. Orders beyond the list reuse the last entry.
    pub p_term: Vec<f64>,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            p_eps: 10.0,
            p_a: 0.01,
            p_term: vec![0.02, 0.04],
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p_eps, self.p_a].into_iter().chain(self.p_term.iter().copied());
        if all.clone().any(|w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("penalty weights must be positive and finite".into()));
        }
        if self.p_term.is_empty() {
            return Err(Error::Config("p_term needs at least one entry".into()));
        }
        if self.p_term.iter().any(|&w| w <= self.p_a) {
            return Err(Error::Config("every p_term must exceed p_a".into()));
        }
        if self.p_term.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("p_term must be non-decreasing in order".into()));
        }
        Ok(())
    }

    pub fn term(&self, order: usize) -> f64 {
        let i = order.max(1) - 1;
        self.p_term[i.min(self.p_term.len() - 1)]
    }

    pub fn scaled(&self, factor: f64) -> PenaltyWeights {
        PenaltyWeights {
            p_eps: self.p_eps * factor,
            p_a: self.p_a * factor,
            p_term: self.p_term.iter().map(|w| w * factor).collect(),
        }
    }
}

/// Center of the L1 penalty on the reference matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    /// Identity on the state block, zero on imposed columns.
    #[default]
    Identity,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub norm: ResidualNorm,
    pub prior: Prior,
    pub solver: SolverOptions,
}

pub const DEFAULT_REFERENCE_WEIGHT: f64 = 10.0;

/// Subsets of `module_names` of size `q` (or 1..=q with `up_to`), by size and
/// then lexicographically by module position.
pub fn enumerate_subsets(module_names: &[String], q: usize, up_to: bool) -> Result<Vec<Vec<String>>> {
    let m = module_names.len();
    if q == 0 || q > m {
        return Err(Error::Config(format!("subset size {q} outside 1..={m}")));
    }
    let sizes = if up_to { 1..=q } else { q..=q };
    let mut out = Vec::new();
    for size in sizes {
        for idx in combinations(m, size) {
            out.push(idx.iter().map(|&i| module_names[i].clone()).collect());
        }
    }
    Ok(out)
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > m {
        return out;
    }
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + m - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Nonempty sub-subsets of `subset`, by order and then lexicographically.
pub fn terms(subset: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for k in 1..=subset.len() {
        for idx in combinations(subset.len(), k) {
            out.push(idx.iter().map(|&i| subset[i].clone()).collect());
        }
    }
    out
}

pub fn term_name(term: &[String]) -> String {
    term.join("*")
}

pub fn combination_name(subset: &[String]) -> String {
    subset.join(" . ")
}

/// One 0/1 series per corrective term over the stacked transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationColumns {
    pub terms: Vec<Vec<String>>,
    pub columns: Vec<Vec<f64>>,
}

impl ActivationColumns {
    /// Products of module flags; `flags` is rows × modules of 0/1 values.
    pub fn from_flags(flags: &DMatrix<f64>, module_names: &[String], subset: &[String]) -> Result<Self> {
        let positions: Vec<usize> = subset
            .iter()
            .map(|s| {
                module_names
                    .iter()
                    .position(|m| m == s)
                    .ok_or_else(|| Error::UnknownModule(s.clone()))
            })
            .collect::<Result<_>>()?;
        let terms = terms(subset);
        let columns = terms
            .iter()
            .map(|term| {
                let cols: Vec<usize> = term
                    .iter()
                    .map(|t| positions[subset.iter().position(|s| s == t).unwrap()])
                    .collect();
                (0..flags.nrows())
                    .map(|r| cols.iter().map(|&c| flags[(r, c)]).product())
                    .collect()
            })
            .collect();
        Ok(ActivationColumns { terms, columns })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations for `reference_rows` stacked reference rows (all zero)
/// followed by every step of `schedule`.
pub fn build_activations(
    schedule: &Schedule,
    subset: &[String],
    reference_rows: usize,
) -> Result<ActivationColumns> {
    let m = schedule.module_names.len();
    let flags = DMatrix::from_fn(reference_rows + schedule.len(), m, |r, j| {
        if r < reference_rows {
            0.0
        } else {
            schedule.flag(r - reference_rows, j)
        }
    });
    ActivationColumns::from_flags(&flags, &schedule.module_names, subset)
}

/// Transition pairs from the reference run and the scheduled runs, stacked.
#[derive(Debug, Clone)]
pub struct StackedData {
    pub state_cols: Vec<String>,
    pub imposed_cols: Vec<String>,
    pub module_names: Vec<String>,
    /// N × (p + c): states then imposed variables at step t.
    pub regressors: DMatrix<f64>,
    /// N × p: states at step t + 1.
    pub targets: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// N × m module flags at step t; zero on reference rows.
    pub flags: DMatrix<f64>,
}

impl StackedData {
    pub fn build(
        reference: &DataTable,
        runs: &[&DataTable],
        state_cols: &[String],
        imposed_cols: &[String],
        module_names: &[String],
        reference_weight: f64,
    ) -> Result<Self> {
        if !(reference_weight > 0.0) {
            return Err(Error::Config("reference weight must be positive".into()));
        }
        if state_cols.is_empty() {
            return Err(Error::Config("no state columns selected".into()));
        }
        let regs: Vec<String> = state_cols.iter().chain(imposed_cols).cloned().collect();
        let flag_cols: Vec<String> = module_names.iter().map(|m| boolean_column(m)).collect();
        for run in runs {
            run.require(&flag_cols)?;
        }
        let mut tables = vec![reference];
        tables.extend_from_slice(runs);
        let (regressors, targets) = transition_pairs(&tables, &regs, state_cols)?;
        let n_ref = reference.nrows().saturating_sub(1);
        let mut weights = vec![reference_weight; n_ref];
        let mut flags = DMatrix::zeros(regressors.nrows(), module_names.len());
        let mut offset = n_ref;
        for run in runs {
            let n = run.nrows().saturating_sub(1);
            let fm = run.matrix_of(&flag_cols)?;
            flags.rows_mut(offset, n).copy_from(&fm.rows(0, n));
            weights.extend(std::iter::repeat_n(1.0, n));
            offset += n;
        }
        Ok(StackedData {
            state_cols: state_cols.to_vec(),
            imposed_cols: imposed_cols.to_vec(),
            module_names: module_names.to_vec(),
            regressors,
            targets,
            weights,
            flags,
        })
    }

    pub fn activations(&self, subset: &[String]) -> Result<ActivationColumns> {
        ActivationColumns::from_flags(&self.flags, &self.module_names, subset)
    }

    pub fn nstates(&self) -> usize {
        self.state_cols.len()
    }

    pub fn nregressors(&self) -> usize {
        self.regressors.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMatrix {
    pub modules: Vec<String>,
    /// p × (p + c), same layout as the reference matrix.
    pub matrix: DMatrix<f64>,
    pub l1: f64,
}

impl TermMatrix {
    pub fn order(&self) -> usize {
        self.modules.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRadius {
    /// Modules whose flags are set in this pattern.
    pub active: Vec<String>,
    pub radius: f64,
}

impl PatternRadius {
    pub fn label(&self) -> String {
        if self.active.is_empty() {
            "Ref".into()
        } else {
            format!("Ref+{}", self.active.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetModel {
    pub subset: Vec<String>,
    pub state_cols: Vec<String>,
    pub imposed_cols: Vec<String>,
    /// p × (p + c): row i is the equation for state i; the last c columns
    /// multiply imposed variables.
    pub reference: DMatrix<f64>,
    pub terms: Vec<TermMatrix>,
    pub prior: Prior,
    /// Weighted residual sum (squared or absolute per the residual norm).
    pub rss: f64,
    /// ‖reference − prior‖₁.
    pub l1_reference: f64,
    pub score: f64,
    pub converged: bool,
    pub iterations: usize,
    pub radii: Vec<PatternRadius>,
}

impl SubsetModel {
    pub fn terms_l1(&self) -> f64 {
        self.terms.iter().map(|t| t.l1).sum()
    }

    pub fn recompute_score(&self, weights: &PenaltyWeights) -> f64 {
        weights.p_eps * self.rss
            + weights.p_a * self.l1_reference
            + self
                .terms
                .iter()
                .map(|t| weights.term(t.order()) * t.l1)
                .sum::<f64>()
    }

    /// State-block transition matrix with the given terms switched on.
    pub fn effective_state_matrix(&self, active: &[String]) -> DMatrix<f64> {
        let p = self.state_cols.len();
        let mut a = self.reference.columns(0, p).into_owned();
        for t in &self.terms {
            if t.modules.iter().all(|m| active.contains(m)) {
                a += t.matrix.columns(0, p);
            }
        }
        a
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn prior_matrix(prior: Prior, p: usize, k: usize) -> DMatrix<f64> {
    match prior {
        Prior::Identity => DMatrix::from_fn(p, k, |i, j| if i == j { 1.0 } else { 0.0 }),
        Prior::Zero => DMatrix::zeros(p, k),
    }
}

/// Fit the reference matrix and one corrective matrix per term of `subset`.
pub fn fit_subset(
    data: &StackedData,
    subset: &[String],
    weights: &PenaltyWeights,
    options: &FitOptions,
) -> Result<SubsetModel> {
    weights.validate()?;
    let activations = data.activations(subset)?;
    fit_with_activations(data, subset, &activations, weights, options)
}

pub fn fit_with_activations(
    data: &StackedData,
    subset: &[String],
    activations: &ActivationColumns,
    weights: &PenaltyWeights,
    options: &FitOptions,
) -> Result<SubsetModel> {
    let n = data.regressors.nrows();
    let p = data.nstates();
    let k = data.nregressors();
    let nt = activations.terms.len();
    if activations.columns.iter().any(|c| c.len() != n) {
        return Err(Error::Schema("activation length differs from stacked data".into()));
    }

    // Design: [z, δ₁ z, δ₂ z, ...]; a never-active term gives zero columns,
    // which the solver pins at zero.
    let width = k * (1 + nt);
    let mut x = DMatrix::zeros(n, width);
    x.columns_mut(0, k).copy_from(&data.regressors);
    for (ti, col) in activations.columns.iter().enumerate() {
        let mut block = data.regressors.clone();
        for (r, d) in col.iter().enumerate() {
            if *d != 1.0 {
                block.row_mut(r).scale_mut(*d);
            }
        }
        x.columns_mut(k * (ti + 1), k).copy_from(&block);
    }
    let mut lambda = vec![weights.p_a; k];
    for term in &activations.terms {
        lambda.extend(std::iter::repeat_n(weights.term(term.len()), k));
    }
    let prior = prior_matrix(options.prior, p, k);

    let solutions: Vec<PenalizedSolution> = (0..p)
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = data.targets.column(i).iter().copied().collect();
            let mut center = vec![0.0; width];
            for j in 0..k {
                center[j] = prior[(i, j)];
            }
            let problem = PenalizedProblem {
                x: &x,
                y: &y,
                w: &data.weights,
                p_eps: weights.p_eps,
                lambda: &lambda,
                prior: &center,
                norm: options.norm,
            };
            solve(&problem, options.solver)
        })
        .collect();

    if solutions.iter().any(|s| s.beta.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("solver produced non-finite coefficients".into()));
    }
    let block = |b: usize| DMatrix::from_fn(p, k, |i, j| solutions[i].beta[b * k + j]);
    let reference = block(0);
    let term_mats: Vec<TermMatrix> = activations
        .terms
        .iter()
        .enumerate()
        .map(|(ti, modules)| {
            let matrix = block(ti + 1);
            TermMatrix {
                modules: modules.clone(),
                l1: l1_norm(&matrix),
                matrix,
            }
        })
        .collect();
    let rss = solutions.iter().map(|s| s.residual).sum();
    let l1_reference = l1_norm(&(&reference - &prior));
    let mut model = SubsetModel {
        subset: subset.to_vec(),
        state_cols: data.state_cols.clone(),
        imposed_cols: data.imposed_cols.clone(),
        reference,
        terms: term_mats,
        prior: options.prior,
        rss,
        l1_reference,
        score: 0.0,
        converged: solutions.iter().all(|s| s.converged),
        iterations: solutions.iter().map(|s| s.iterations).max().unwrap_or(0),
        radii: Vec::new(),
    };
    model.score = model.recompute_score(weights);
    model.radii = eigen_report(&model)?;
    Ok(model)
}

/// Spectral radius of the state block under each of the 2^q activation
/// patterns, in binary-counting order (first module as the low bit).
pub fn eigen_report(model: &SubsetModel) -> Result<Vec<PatternRadius>> {
    let q = model.subset.len();
    (0..1usize << q)
        .map(|mask| {
            let active: Vec<String> = (0..q)
                .filter(|j| mask >> j & 1 == 1)
                .map(|j| model.subset[j].clone())
                .collect();
            let radius = spectral_radius(&model.effective_state_matrix(&active))?;
            Ok(PatternRadius { active, radius })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Status {
    Ok,
    NotConverged,
    Failed(String),
}

impl Status {
    pub fn label(&self) -> String {
        match self {
            Status::Ok => "ok".into(),
            Status::NotConverged => "not_converged".into(),
            Status::Failed(msg) => format!("failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub subset: Vec<String>,
    pub status: Status,
    pub rss: f64,
    pub l1_reference: f64,
    pub l1_terms: f64,
    pub score: f64,
    pub seconds: f64,
    pub model: Option<SubsetModel>,
}

impl RankEntry {
    pub fn combination(&self) -> String {
        combination_name(&self.subset)
    }
}

/// Fit every subset and sort ascending by score; ties go to the smaller total
/// corrective norm, then to enumeration order. Failed subsets sort last.
pub fn rank_combinations(
    data: &StackedData,
    subsets: &[Vec<String>],
    weights: &PenaltyWeights,
    options: &FitOptions,
) -> Result<Vec<RankEntry>> {
    weights.validate()?;
    let mut entries: Vec<(usize, RankEntry)> = subsets
        .par_iter()
        .enumerate()
        .map(|(idx, subset)| {
            let start = Instant::now();
            let fitted = fit_subset(data, subset, weights, options);
            let seconds = start.elapsed().as_secs_f64();
            let entry = match fitted {
                Ok(model) => RankEntry {
                    subset: subset.clone(),
                    status: if model.converged { Status::Ok } else { Status::NotConverged },
                    rss: model.rss,
                    l1_reference: model.l1_reference,
                    l1_terms: model.terms_l1(),
                    score: model.score,
                    seconds,
                    model: Some(model),
                },
                Err(e) => RankEntry {
                    subset: subset.clone(),
                    status: Status::Failed(e.to_string()),
                    rss: f64::NAN,
                    l1_reference: f64::NAN,
                    l1_terms: f64::NAN,
                    score: f64::NAN,
                    seconds,
                    model: None,
                },
            };
            (idx, entry)
        })
        .collect();
    entries.sort_by(|(ia, a), (ib, b)| {
        let failed = |e: &RankEntry| matches!(e.status, Status::Failed(_));
        failed(a)
            .cmp(&failed(b))
            .then(a.score.total_cmp(&b.score))
            .then(a.l1_terms.total_cmp(&b.l1_terms))
            .then(ia.cmp(ib))
    });
    Ok(entries.into_iter().map(|(_, e)| e).collect())
}

pub fn ranking_csv(entries: &[RankEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["Combination", "Status", "RSS", "L1_Aref", "L1_Am", "TotalScore", "CPU"])?;
    for e in entries {
        w.write_record([
            e.combination(),
            e.status.label(),
            format!("{:.6}", e.rss),
            format!("{:.6}", e.l1_reference),
            format!("{:.6}", e.l1_terms),
            format!("{:.6}", e.score),
            format!("{:.3}", e.seconds),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
