//! Single-output penalized least squares with per-coefficient L1 weights and
//! a per-coefficient prior (center of the penalty):
//!
//! ```text
//! min_β  p_eps · Σ_t w_t ρ(y_t − x_tᵀβ) + Σ_j λ_j |β_j − prior_j|
//! ```
//!
//! with ρ(r) = r² (coordinate descent with soft-thresholding on the Gram
//! matrix, plus an exact active-set polish) or ρ(r) = |r| (majorize–minimize
//! over reweighted quadratic problems).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualNorm {
    /// Squared residuals.
    #[default]
    L2,
    /// Absolute residuals.
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative objective decrease below which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// A single-output problem. `x` is n × k, `y` and `w` have length n.
#[derive(Debug, Clone)]
pub struct PenalizedProblem<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub w: &'a [f64],
    pub p_eps: f64,
    pub lambda: &'a [f64],
    pub prior: &'a [f64],
    pub norm: ResidualNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedSolution {
    pub beta: Vec<f64>,
    pub objective: f64,
    /// Σ w ρ(residual), without the p_eps factor.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every outer iteration; non-increasing.
    pub trace: Vec<f64>,
}

impl PenalizedProblem<'_> {
    pub fn residual_term(&self, beta: &[f64]) -> f64 {
        let fitted = self.x * DVector::from_column_slice(beta);
        self.y
            .iter()
            .zip(fitted.iter())
            .zip(self.w)
            .map(|((y, f), w)| {
                let r = y - f;
                match self.norm {
                    ResidualNorm::L2 => w * r * r,
                    ResidualNorm::L1 => w * r.abs(),
                }
            })
            .sum()
    }

    pub fn penalty(&self, beta: &[f64]) -> f64 {
        beta.iter()
            .zip(self.lambda)
            .zip(self.prior)
            .map(|((b, l), p)| l * (b - p).abs())
            .sum()
    }

    pub fn objective(&self, beta: &[f64]) -> f64 {
        self.p_eps * self.residual_term(beta) + self.penalty(beta)
    }
}

/// Quadratic form of a weighted least-squares problem in shifted
/// coordinates γ = β − prior:
/// `p_eps (γᵀ G γ − 2 cᵀ γ + s) + Σ λ |γ|`.
struct Quadratic {
    g: DMatrix<f64>,
    c: DVector<f64>,
    s: f64,
    p_eps: f64,
}

impl Quadratic {
    fn new(x: &DMatrix<f64>, y: &[f64], w: &[f64], prior: &[f64], p_eps: f64) -> Self {
        let prior = DVector::from_column_slice(prior);
        let shifted = DVector::from_column_slice(y) - x * &prior;
        let wv = DVector::from_column_slice(w);
        let mut wx = x.clone();
        for (mut row, wt) in wx.row_iter_mut().zip(wv.iter()) {
            row *= *wt;
        }
        let g = x.transpose() * &wx;
        let c = wx.transpose() * &shifted;
        let s = shifted.iter().zip(wv.iter()).map(|(r, w)| w * r * r).sum();
        Quadratic { g, c, s, p_eps }
    }

    fn value(&self, gamma: &DVector<f64>, lambda: &[f64]) -> f64 {
        let quad = gamma.dot(&(&self.g * gamma)) - 2.0 * self.c.dot(gamma) + self.s;
        self.p_eps * quad.max(0.0) + gamma.iter().zip(lambda).map(|(g, l)| l * g.abs()).sum::<f64>()
    }

    /// Cyclic coordinate descent from `gamma`; every coordinate update is an
    /// exact minimization, so the objective never increases.
    fn coordinate_descent(
        &self,
        gamma: &mut DVector<f64>,
        lambda: &[f64],
        opts: SolverOptions,
        trace: &mut Vec<f64>,
    ) -> (usize, bool) {
        let k = gamma.len();
        let mut g_gamma = &self.g * &*gamma;
        let mut prev = self.value(gamma, lambda);
        for sweep in 1..=opts.max_iter {
            for j in 0..k {
                let gjj = self.g[(j, j)];
                let old = gamma[j];
                let new = if gjj <= 0.0 {
                    0.0
                } else {
                    let rho = self.c[j] - (g_gamma[j] - gjj * old);
                    soft_threshold(rho, lambda[j] / (2.0 * self.p_eps)) / gjj
                };
                if new != old {
                    let delta = new - old;
                    g_gamma.axpy(delta, &self.g.column(j), 1.0);
                    gamma[j] = new;
                }
            }
            let value = self.value(gamma, lambda);
            let value = value.min(prev);
            trace.push(value);
            if prev - value <= opts.tol * value.abs().max(f64::MIN_POSITIVE) {
                return (sweep, true);
            }
            prev = value;
        }
        (opts.max_iter, false)
    }

    /// Solve the quadratic exactly on the current support with signs fixed;
    /// accept only if the result keeps its signs, satisfies the optimality
    /// conditions off-support and lowers the objective.
    fn polish(&self, gamma: &mut DVector<f64>, lambda: &[f64]) -> bool {
        let support: Vec<usize> = (0..gamma.len()).filter(|&j| gamma[j] != 0.0).collect();
        if support.is_empty() {
            return false;
        }
        let gs = self.g.select_rows(support.iter()).select_columns(support.iter());
        let rhs = DVector::from_iterator(
            support.len(),
            support
                .iter()
                .map(|&j| self.c[j] - lambda[j] / (2.0 * self.p_eps) * gamma[j].signum()),
        );
        let Some(chol) = gs.cholesky() else { return false };
        let sol = chol.solve(&rhs);
        if support
            .iter()
            .zip(sol.iter())
            .any(|(&j, v)| v.signum() != gamma[j].signum() || *v == 0.0)
        {
            return false;
        }
        let mut candidate = DVector::zeros(gamma.len());
        for (&j, v) in support.iter().zip(sol.iter()) {
            candidate[j] = *v;
        }
        let grad = &self.g * &candidate - &self.c;
        let kkt = (0..gamma.len())
            .filter(|j| !support.contains(j))
            .all(|j| grad[j].abs() <= lambda[j] / (2.0 * self.p_eps) * (1.0 + 1e-9) + 1e-14);
        if kkt && self.value(&candidate, lambda) <= self.value(gamma, lambda) {
            *gamma = candidate;
            true
        } else {
            false
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn solve(problem: &PenalizedProblem<'_>, opts: SolverOptions) -> PenalizedSolution {
    let k = problem.x.ncols();
    assert_eq!(problem.lambda.len(), k);
    assert_eq!(problem.prior.len(), k);
    match problem.norm {
        ResidualNorm::L2 => solve_l2(problem, opts, None),
        ResidualNorm::L1 => solve_l1(problem, opts),
    }
}

fn solve_l2(
    problem: &PenalizedProblem<'_>,
    opts: SolverOptions,
    warm: Option<&[f64]>,
) -> PenalizedSolution {
    let q = Quadratic::new(problem.x, problem.y, problem.w, problem.prior, problem.p_eps);
    let k = problem.x.ncols();
    let mut gamma = match warm {
        Some(b) => DVector::from_iterator(k, b.iter().zip(problem.prior).map(|(b, p)| b - p)),
        None => DVector::zeros(k),
    };
    let mut trace = vec![q.value(&gamma, problem.lambda)];
    let mut iterations = 0;
    let mut converged = false;
    // Alternate CD (which fixes the support) with exact polishing.
    for _ in 0..20 {
        let budget = SolverOptions {
            max_iter: opts.max_iter.saturating_sub(iterations).max(1),
            ..opts
        };
        let (it, ok) = q.coordinate_descent(&mut gamma, problem.lambda, budget, &mut trace);
        iterations += it;
        converged = ok;
        let before = *trace.last().unwrap();
        if !q.polish(&mut gamma, problem.lambda) {
            break;
        }
        let after = q.value(&gamma, problem.lambda).min(before);
        trace.push(after);
        if before - after <= opts.tol * after.abs().max(f64::MIN_POSITIVE) * 1e-4 {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
    }
    let beta: Vec<f64> = gamma.iter().zip(problem.prior).map(|(g, p)| g + p).collect();
    finish(problem, beta, iterations, converged, trace)
}

fn solve_l1(problem: &PenalizedProblem<'_>, opts: SolverOptions) -> PenalizedSolution {
    let l2 = PenalizedProblem {
        norm: ResidualNorm::L2,
        ..problem.clone()
    };
    let start = solve_l2(&l2, opts, None);
    let mut beta = start.beta;
    let mut best = problem.objective(&beta);
    let mut trace = vec![best];
    let scale = problem
        .y
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let eps = 1e-10 * scale;
    let mut converged = false;
    let mut iterations = start.iterations;
    let max_outer = 200;
    for _ in 0..max_outer {
        let fitted = problem.x * DVector::from_column_slice(&beta);
        // |r| ≤ r²/(2|r₀|) + |r₀|/2, so the reweighted problem majorizes.
        let w: Vec<f64> = problem
            .y
            .iter()
            .zip(fitted.iter())
            .zip(problem.w)
            .map(|((y, f), w)| w / (2.0 * (y - f).abs().max(eps)))
            .collect();
        let surrogate = PenalizedProblem {
            w: &w,
            norm: ResidualNorm::L2,
            ..problem.clone()
        };
        let step = solve_l2(&surrogate, opts, Some(&beta));
        iterations += step.iterations;
        let value = problem.objective(&step.beta);
        if value > best {
            converged = true;
            break;
        }
        let gain = best - value;
        beta = step.beta;
        best = value;
        trace.push(best);
        if gain <= opts.tol * best.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    finish(problem, beta, iterations, converged, trace)
}

fn finish(
    problem: &PenalizedProblem<'_>,
    beta: Vec<f64>,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
) -> PenalizedSolution {
    let residual = problem.residual_term(&beta);
    PenalizedSolution {
        objective: problem.p_eps * residual + problem.penalty(&beta),
        residual,
        beta,
        iterations,
        converged,
        trace,
    }
}
