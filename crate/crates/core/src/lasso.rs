//! Sample-weighted L1-penalized logistic regression.
//!
//! Minimizes
//!
//! ```text
//! λ‖β‖₁ − (1/N) Σ_i Σ_j w_ij · ( y_i·h(x_ij) − log(1 + e^{h(x_ij)}) ),   h(x) = β₀ + xᵀβ
//! ```
//!
//! where `N` counts stays and each stay's row weights sum to one. The solver
//! runs cyclic coordinate descent with soft-thresholding on a local quadratic
//! model of the loss, guarded so the objective never increases (see [`fit`]).

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{DesignRow, EncodedStay};
use crate::error::{Error, Result};
use crate::eval;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Design in compressed-column form plus per-row labels and weights.
#[derive(Debug, Clone)]
pub struct FitProblem {
    p: usize,
    n_stays: usize,
    y: Vec<f64>,
    w: Vec<f64>,
    cols: Vec<Vec<(u32, f64)>>,
}

impl FitProblem {
    pub fn new(rows: &[DesignRow], p: usize) -> Result<Self> {
        Self::from_row_iter(rows.iter(), p)
    }

    /// Pool the training rows of the given stays.
    pub fn from_stays<'a>(stays: impl IntoIterator<Item = &'a EncodedStay>, p: usize) -> Result<Self> {
        Self::from_row_iter(stays.into_iter().flat_map(|s| s.train.iter()), p)
    }

    fn from_row_iter<'a>(rows: impl Iterator<Item = &'a DesignRow>, p: usize) -> Result<Self> {
        // The loss depends on rows only through (x, y) and summed weight, so
        // duplicates merge exactly; binned stays repeat rows heavily.
        let mut y = Vec::new();
        let mut w: Vec<f64> = Vec::new();
        let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); p];
        let mut sums: HashMap<Arc<str>, f64> = HashMap::new();
        let mut seen: HashMap<(bool, Vec<(u32, u64)>), usize> = HashMap::new();
        for r in rows {
            if r.x.len() != p {
                return Err(Error::data(format!("design row has {} columns, expected {p}", r.x.len())));
            }
            if !(r.weight >= 0.0 && r.weight.is_finite()) {
                return Err(Error::data(format!("invalid row weight {}", r.weight)));
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::data("non-finite design value"));
            }
            *sums.entry(r.stay_id.clone()).or_default() += r.weight;
            let key: Vec<(u32, u64)> = r
                .x
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(k, v)| (k as u32, v.to_bits()))
                .collect();
            match seen.entry((r.positive, key)) {
                std::collections::hash_map::Entry::Occupied(e) => w[*e.get()] += r.weight,
                std::collections::hash_map::Entry::Vacant(e) => {
                    let i = y.len();
                    for &(k, bits) in &e.key().1 {
                        cols[k as usize].push((i as u32, f64::from_bits(bits)));
                    }
                    e.insert(i);
                    y.push(if r.positive { 1.0 } else { 0.0 });
                    w.push(r.weight);
                }
            }
        }
        if y.is_empty() {
            return Err(Error::data("fit problem has no rows"));
        }
        if let Some((id, s)) = sums.iter().find(|(_, s)| (*s - 1.0).abs() > WEIGHT_SUM_TOL) {
            return Err(Error::data(format!("weights of stay `{id}` sum to {s}, not 1")));
        }
        let n_stays = sums.len();
        Ok(Self {
            p,
            n_stays,
            y,
            w,
            cols,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_stays(&self) -> usize {
        self.n_stays
    }

    /// Distinct (row, label) patterns after merging duplicates.
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    fn linear_predictor(&self, intercept: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![intercept; self.n_rows()];
        for (col, &b) in self.cols.iter().zip(beta) {
            if b != 0.0 {
                for &(i, v) in col {
                    eta[i as usize] += b * v;
                }
            }
        }
        eta
    }
}

fn sigmoid(h: f64) -> f64 {
    1.0 / (1.0 + (-h).exp())
}

/// log(1 + e^h) without overflow.
fn softplus(h: f64) -> f64 {
    if h > 0.0 {
        h + (-h).exp().ln_1p()
    } else {
        h.exp().ln_1p()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective after each sweep, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

impl GlmFit {
    pub fn new(intercept: f64, beta: Vec<f64>, lambda: f64) -> Self {
        Self {
            intercept,
            beta,
            lambda,
            converged: true,
            sweeps: 0,
            trace: Vec::new(),
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn support(&self) -> usize {
        self.beta.iter().filter(|b| **b != 0.0).count()
    }

    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }
}

fn smooth_loss(problem: &FitProblem, eta: &[f64]) -> f64 {
    let s: f64 = eta
        .iter()
        .zip(&problem.y)
        .zip(&problem.w)
        .map(|((&h, &y), &w)| w * (y * h - softplus(h)))
        .sum();
    -s / problem.n_stays as f64
}

/// Penalized objective at `model.lambda`.
pub fn objective(model: &GlmFit, problem: &FitProblem) -> f64 {
    let eta = problem.linear_predictor(model.intercept, &model.beta);
    model.lambda * model.l1_norm() + smooth_loss(problem, &eta)
}

/// Gradient of the smooth (unpenalized) part: `(d/dβ₀, d/dβ)`.
pub fn gradient_smooth(model: &GlmFit, problem: &FitProblem) -> (f64, Vec<f64>) {
    let eta = problem.linear_predictor(model.intercept, &model.beta);
    gradient_at(problem, &eta)
}

fn gradient_at(problem: &FitProblem, eta: &[f64]) -> (f64, Vec<f64>) {
    let nf = problem.n_stays as f64;
    let resid: Vec<f64> = eta
        .iter()
        .zip(&problem.y)
        .zip(&problem.w)
        .map(|((&h, &y), &w)| w * (sigmoid(h) - y))
        .collect();
    let d0 = resid.iter().sum::<f64>() / nf;
    let d = problem
        .cols
        .iter()
        .map(|c| c.iter().map(|&(i, v)| resid[i as usize] * v).sum::<f64>() / nf)
        .collect();
    (d0, d)
}

/// Largest KKT violation: intercept stationarity, `|g| ≤ λ` on zeros and
/// `g = −λ·sign(β)` on nonzeros.
pub fn kkt_violation(model: &GlmFit, problem: &FitProblem) -> f64 {
    let (d0, d) = gradient_smooth(model, problem);
    d.iter()
        .zip(&model.beta)
        .map(|(&g, &b)| {
            if b == 0.0 {
                (g.abs() - model.lambda).max(0.0)
            } else {
                (g + model.lambda * b.signum()).abs()
            }
        })
        .fold(d0.abs(), f64::max)
}

/// Intercept minimizing the loss with β = 0: the weighted log-odds.
fn null_intercept(problem: &FitProblem) -> f64 {
    let sw: f64 = problem.w.iter().sum();
    let swy: f64 = problem.w.iter().zip(&problem.y).map(|(w, y)| w * y).sum();
    let rate = (swy / sw).clamp(1e-12, 1.0 - 1e-12);
    (rate / (1.0 - rate)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaMax {
    pub lambda: f64,
    pub intercept: f64,
}

/// Smallest λ at which β = 0 is optimal.
pub fn lambda_max(problem: &FitProblem) -> LambdaMax {
    let intercept = null_intercept(problem);
    let eta = vec![intercept; problem.n_rows()];
    let (_, d) = gradient_at(problem, &eta);
    let lambda = d.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let single_class = problem.y.iter().all(|&y| y == problem.y[0]);
    if single_class {
        log::warn!("fit problem holds a single class; λ_max is 0");
        return LambdaMax { lambda: 0.0, intercept };
    }
    LambdaMax { lambda, intercept }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Converged once no coefficient moves more than this in a full sweep.
    pub tol: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub record_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
            record_trace: false,
        }
    }
}

/// Minimizes `Σ v_i/2 (z_i − η_i)² + λ‖β‖₁` over (β₀, β) by cyclic coordinate
/// descent, where `z = η₀ − g/v` is the working response at the expansion
/// point. The intercept is profiled out of every coordinate step (implicit
/// weighted centering), which removes the zigzag between β₀ and indicator
/// columns that cover most rows. Residuals are kept as `r̃ + shift` so each
/// step touches only the column's nonzeros.
struct Quadratic<'a> {
    problem: &'a FitProblem,
    v: &'a [f64],
    vsum: f64,
    /// Σ v x and Σ v x² per column.
    vx: Vec<f64>,
    vxx: Vec<f64>,
}

impl<'a> Quadratic<'a> {
    fn new(problem: &'a FitProblem, v: &'a [f64]) -> Self {
        let vx = problem.cols.iter().map(|c| c.iter().map(|&(i, x)| v[i as usize] * x).sum()).collect();
        let vxx = problem
            .cols
            .iter()
            .map(|c| c.iter().map(|&(i, x)| v[i as usize] * x * x).sum())
            .collect();
        Self {
            problem,
            v,
            vsum: v.iter().sum(),
            vx,
            vxx,
        }
    }

    /// Returns the minimizer and the change it makes to the linear predictor.
    fn solve(&self, lambda: f64, g: &[f64], intercept: f64, beta: &[f64], tol: f64, max_sweeps: usize) -> (f64, Vec<f64>, Vec<f64>) {
        // zero-weight rows carry no curvature and no gradient
        let r0: Vec<f64> = g.iter().zip(self.v).map(|(g, v)| if *v > 0.0 { -g / v } else { 0.0 }).collect();
        let mut r = r0.clone();
        let mut shift = 0.0;
        let db = r.iter().zip(self.v).map(|(r, v)| r * v).sum::<f64>() / self.vsum;
        let mut b = intercept + db;
        shift -= db;
        let mut beta = beta.to_vec();
        let mut step = |k: usize, beta: &mut [f64], b: &mut f64, shift: &mut f64| -> f64 {
            let c = self.vx[k] / self.vsum;
            let h = self.vxx[k] - self.vx[k] * c;
            let old = beta[k];
            let new = if h <= 1e-12 * self.vxx[k] {
                // constant on the rows it covers: the intercept absorbs it
                0.0
            } else {
                let col = &self.problem.cols[k];
                let a = col.iter().map(|&(i, x)| self.v[i as usize] * x * r[i as usize]).sum::<f64>() + *shift * self.vx[k];
                soft_threshold(old * h + a, lambda) / h
            };
            let d = new - old;
            if d != 0.0 {
                beta[k] = new;
                for &(i, x) in &self.problem.cols[k] {
                    r[i as usize] -= d * x;
                }
                *shift += d * c;
                *b -= d * c;
            }
            d.abs()
        };
        let all: Vec<usize> = (0..beta.len()).collect();
        let mut sweeps = 0;
        while sweeps < max_sweeps {
            let mut delta = 0.0f64;
            for &k in &all {
                delta = delta.max(step(k, &mut beta, &mut b, &mut shift));
            }
            sweeps += 1;
            if delta < tol {
                break;
            }
            let active: Vec<usize> = all.iter().copied().filter(|&k| beta[k] != 0.0).collect();
            while sweeps < max_sweeps {
                let mut delta = 0.0f64;
                for &k in &active {
                    delta = delta.max(step(k, &mut beta, &mut b, &mut shift));
                }
                sweeps += 1;
                if delta < tol {
                    break;
                }
            }
        }
        let deta = r0.iter().zip(&r).map(|(a, b)| a - b - shift).collect();
        (b, beta, deta)
    }
}

fn penalized(problem: &FitProblem, lambda: f64, beta: &[f64], eta: &[f64]) -> f64 {
    lambda * beta.iter().map(|b| b.abs()).sum::<f64>() + smooth_loss(problem, eta)
}

/// Fit at a fixed λ, optionally warm-started.
///
/// Each outer iteration ("sweep") expands the loss to second order at the
/// current point and minimizes that model plus the penalty by coordinate
/// descent. The step is accepted only if the true objective does not increase,
/// halving it otherwise; if halving fails the model is rebuilt with the global
/// curvature bound ¼·w, a majorizer, whose minimizer cannot increase the
/// objective. Convergence is declared when the model's minimizer lies within
/// `tol` of the current point in every coefficient. A fit that hits `max_iter` returns its last (and best)
/// iterate with `converged = false`.
pub fn fit(problem: &FitProblem, lambda: f64, init: Option<&GlmFit>, opts: &FitOptions) -> GlmFit {
    fit_with(problem, &lambda_max(problem), lambda, init, opts)
}

fn fit_with(problem: &FitProblem, lmax: &LambdaMax, lambda: f64, init: Option<&GlmFit>, opts: &FitOptions) -> GlmFit {
    if lambda >= lmax.lambda && lmax.lambda > 0.0 {
        let mut m = GlmFit::new(lmax.intercept, vec![0.0; problem.p], lambda);
        if opts.record_trace {
            m.trace.push(objective(&m, problem));
        }
        return m;
    }
    let (mut intercept, mut beta) = match init {
        Some(m) if m.beta.len() == problem.p => (m.intercept, m.beta.clone()),
        _ => (lmax.intercept, vec![0.0; problem.p]),
    };
    let nf = problem.n_stays as f64;
    // inner accuracy tightens as the outer steps shrink
    let mut last_step = f64::INFINITY;
    let mut eta = problem.linear_predictor(intercept, &beta);
    let mut f = penalized(problem, lambda, &beta, &eta);
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_iter {
        let mu: Vec<f64> = eta.iter().map(|&h| sigmoid(h)).collect();
        let g: Vec<f64> = mu
            .iter()
            .zip(&problem.y)
            .zip(&problem.w)
            .map(|((m, y), w)| w * (m - y) / nf)
            .collect();
        let newton: Vec<f64> = mu
            .iter()
            .zip(&problem.w)
            .map(|(m, w)| w * (m * (1.0 - m)).max(1e-6) / nf)
            .collect();
        let inner_tol = (1e-2 * last_step).clamp(1e-3 * opts.tol, opts.tol);
        let (b1, beta1, deta) = Quadratic::new(problem, &newton).solve(lambda, &g, intercept, &beta, inner_tol, opts.max_iter);
        sweeps += 1;
        let proposed = beta.iter().zip(&beta1).fold((b1 - intercept).abs(), |m, (a, b)| m.max((a - b).abs()));
        last_step = proposed;
        if proposed < opts.tol {
            // the model's minimizer is within tolerance of the current point
            if opts.record_trace {
                trace.push(f);
            }
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..30 {
            let cb = intercept + t * (b1 - intercept);
            let cbeta: Vec<f64> = beta.iter().zip(&beta1).map(|(a, b)| a + t * (b - a)).collect();
            let ceta: Vec<f64> = eta.iter().zip(&deta).map(|(e, d)| e + t * d).collect();
            let cf = penalized(problem, lambda, &cbeta, &ceta);
            if cf <= f {
                accepted = Some((cb, cbeta, ceta, cf));
                break;
            }
            t *= 0.5;
        }
        if accepted.is_none() {
            let bound: Vec<f64> = problem.w.iter().map(|w| 0.25 * w / nf).collect();
            let (cb, cbeta, deta) = Quadratic::new(problem, &bound).solve(lambda, &g, intercept, &beta, inner_tol, opts.max_iter);
            let ceta: Vec<f64> = eta.iter().zip(&deta).map(|(e, d)| e + d).collect();
            let cf = penalized(problem, lambda, &cbeta, &ceta);
            if cf <= f {
                accepted = Some((cb, cbeta, ceta, cf));
            }
        }
        let Some((cb, cbeta, ceta, cf)) = accepted else {
            // no decrease left to find at working precision
            if opts.record_trace {
                trace.push(f);
            }
            converged = proposed < 1e3 * opts.tol;
            break;
        };
        intercept = cb;
        beta = cbeta;
        eta = ceta;
        f = cf;
        if opts.record_trace {
            trace.push(f);
        }
    }
    if !converged {
        log::warn!("solver did not converge at λ = {lambda:e} within {} sweeps", opts.max_iter);
    }
    GlmFit {
        intercept,
        beta,
        lambda,
        converged,
        sweeps,
        trace,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub n_lambdas: usize,
    pub lambda_min_ratio: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            n_lambdas: 50,
            lambda_min_ratio: 1e-3,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lambdas < 1 {
            return Err(Error::config("n_lambdas must be at least 1"));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::config("lambda_min_ratio must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Log-spaced, strictly decreasing grid from `lambda_max`.
pub fn lambda_grid(lambda_max: f64, config: &PathConfig) -> Vec<f64> {
    if lambda_max <= 0.0 || config.n_lambdas == 1 {
        return vec![lambda_max.max(0.0)];
    }
    let n = config.n_lambdas;
    (0..n)
        .map(|i| lambda_max * config.lambda_min_ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<GlmFit>,
    pub objectives: Vec<f64>,
    #[serde(default)]
    pub cv_mean_auc: Vec<f64>,
    #[serde(default)]
    pub cv_std_auc: Vec<f64>,
}

impl LassoPath {
    pub fn total_sweeps(&self) -> usize {
        self.fits.iter().map(|f| f.sweeps).sum()
    }
}

/// Warm-started fits along `grid`.
pub fn fit_grid(problem: &FitProblem, grid: &[f64], opts: &FitOptions) -> Vec<GlmFit> {
    let lmax = lambda_max(problem);
    let mut fits: Vec<GlmFit> = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let m = fit_with(problem, &lmax, lambda, fits.last(), opts);
        fits.push(m);
    }
    fits
}

pub fn fit_path(problem: &FitProblem, config: &PathConfig, opts: &FitOptions) -> LassoPath {
    let grid = lambda_grid(lambda_max(problem).lambda, config);
    path_on_grid(problem, &grid, opts)
}

pub fn path_on_grid(problem: &FitProblem, grid: &[f64], opts: &FitOptions) -> LassoPath {
    let fits = fit_grid(problem, grid, opts);
    LassoPath {
        lambdas: grid.to_vec(),
        objectives: fits.iter().map(|f| objective(f, problem)).collect(),
        fits,
        cv_mean_auc: Vec::new(),
        cv_std_auc: Vec::new(),
    }
}

/// Stay-level score: maximum over the stay's eligible rows.
pub fn stay_level_score(model: &GlmFit, stay: &EncodedStay) -> f64 {
    stay.eval.iter().map(|r| model.score(&r.x)).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    /// `fold_auc[f][l]`; `None` where the held-out fold lacks a class.
    pub fold_auc: Vec<Vec<Option<f64>>>,
    pub mean_auc: Vec<f64>,
    pub std_auc: Vec<f64>,
    pub best_index: usize,
    pub best_lambda: f64,
}

/// Held-out stay-level AUC of every grid point for every fold.
pub fn cv_fold_aucs(
    stays: &[EncodedStay],
    folds: &[Vec<String>],
    grid: &[f64],
    p: usize,
    opts: &FitOptions,
) -> Result<Vec<Vec<Option<f64>>>> {
    let run_fold = |fold: &Vec<String>| -> Result<Vec<Option<f64>>> {
        let held: HashSet<&str> = fold.iter().map(String::as_str).collect();
        let (test, train): (Vec<&EncodedStay>, Vec<&EncodedStay>) =
            stays.iter().partition(|s| held.contains(&*s.stay_id));
        let problem = FitProblem::from_stays(train.iter().copied().filter(|s| !s.train.is_empty()), p)?;
        let fits = fit_grid(&problem, grid, opts);
        let labels: Vec<bool> = test.iter().map(|s| s.positive).collect();
        Ok(fits
            .iter()
            .map(|m| {
                let scores: Vec<f64> = test.iter().map(|s| stay_level_score(m, s)).collect();
                eval::auc(&scores, &labels).ok()
            })
            .collect())
    };
    // folds are independent; results are collected in fold order
    let results = crate::par::par_map(folds, run_fold);
    let mut out = Vec::with_capacity(folds.len());
    for (f, aucs) in results.into_iter().enumerate() {
        let aucs = aucs?;
        if aucs.iter().any(Option::is_none) {
            log::warn!("fold {f} holds a single class; its AUC is excluded from the CV mean");
        }
        out.push(aucs);
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean held-out AUC over folds with a defined AUC, per grid point.
pub fn summarize_folds(fold_auc: &[Vec<Option<f64>>], n_grid: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n_grid)
        .map(|l| {
            let vals: Vec<f64> = fold_auc.iter().filter_map(|f| f[l]).collect();
            mean_std(&vals)
        })
        .unzip()
}

/// Index of the highest mean AUC on a decreasing λ grid; the first
/// (largest-λ) index wins ties. NaN entries are skipped.
pub fn best_grid_index(mean_auc: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (l, &m) in mean_auc.iter().enumerate() {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|b| m > mean_auc[b] + 1e-12) {
            best = Some(l);
        }
    }
    best
}

/// Choose λ by grouped k-fold CV on stay-level AUC; ties go to the larger λ.
pub fn select_lambda_cv(
    stays: &[EncodedStay],
    folds: &[Vec<String>],
    grid: &[f64],
    p: usize,
    opts: &FitOptions,
) -> Result<CvResult> {
    let fold_auc = cv_fold_aucs(stays, folds, grid, p, opts)?;
    let (mean_auc, std_auc) = summarize_folds(&fold_auc, grid.len());
    let best_index = best_grid_index(&mean_auc)
        .ok_or_else(|| Error::data("no cross-validation fold holds both classes; cannot select λ"))?;
    Ok(CvResult {
        lambdas: grid.to_vec(),
        fold_auc,
        mean_auc,
        std_auc,
        best_index,
        best_lambda: grid[best_index],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random problem: `n_stays` stays with 1..=max_rows rows each,
    /// per-stay normalized weights, dense Gaussian columns.
    fn random_problem(seed: u64, n_stays: usize, max_rows: usize, p: usize) -> Vec<DesignRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut rows = Vec::new();
        for s in 0..n_stays {
            let id: Arc<str> = Arc::from(format!("s{s}").as_str());
            let positive = s % 2 == 0;
            let n = rng.random_range(1..=max_rows);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (j, w) in raw.iter().enumerate() {
                let x: Vec<f64> = truth
                    .iter()
                    .map(|t| rng.random_range(-1.0..1.0) + if positive { 0.3 * t } else { 0.0 })
                    .collect();
                rows.push(DesignRow {
                    x,
                    weight: w / total,
                    positive,
                    stay_id: id.clone(),
                    bin: j as u32,
                });
            }
        }
        rows
    }

    fn tight() -> FitOptions {
        FitOptions {
            tol: 1e-10,
            max_iter: 200_000,
            record_trace: false,
        }
    }

    #[test]
    fn objective_examples() {
        let one = |x: f64, y: bool| DesignRow {
            x: vec![x],
            weight: 1.0,
            positive: y,
            stay_id: Arc::from("a"),
            bin: 0,
        };
        let mut b = one(0.0, false);
        b.stay_id = Arc::from("b");
        let pr = FitProblem::new(&[one(0.0, true), b], 1).unwrap();
        let zero = GlmFit::new(0.0, vec![0.0], 0.0);
        assert!((objective(&zero, &pr) - 2f64.ln()).abs() < 1e-12);

        let pr = FitProblem::new(&[one(1.0, true)], 1).unwrap();
        let m = GlmFit::new(0.0, vec![3.0], 0.0);
        let expected = (1.0 + 3f64.exp()).ln() - 3.0;
        assert!((objective(&m, &pr) - expected).abs() < 1e-12);
        assert!((objective(&m, &pr) - 0.04859).abs() < 1e-5);

        let rows = random_problem(1, 4, 3, 2);
        let pr = FitProblem::new(&rows, 2).unwrap();
        let a = GlmFit::new(0.1, vec![1.5, -0.5], 0.0);
        let b = GlmFit::new(0.1, vec![1.5, -0.5], 0.1);
        assert!((objective(&b, &pr) - objective(&a, &pr) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gradient_at_zero_all_positive() {
        let rows: Vec<DesignRow> = (0..3)
            .map(|s| DesignRow {
                x: vec![1.0],
                weight: 1.0,
                positive: true,
                stay_id: Arc::from(format!("{s}").as_str()),
                bin: 0,
            })
            .collect();
        let pr = FitProblem::new(&rows, 1).unwrap();
        let (d0, _) = gradient_smooth(&GlmFit::new(0.0, vec![0.0], 0.0), &pr);
        assert!((d0 + 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let rows = random_problem(seed, 5, 3, 8);
            let pr = FitProblem::new(&rows, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let beta: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = GlmFit::new(0.3, beta.clone(), 0.0);
            let (d0, d) = gradient_smooth(&m, &pr);
            let h = 1e-5;
            let f = |b0: f64, b: &[f64]| objective(&GlmFit::new(b0, b.to_vec(), 0.0), &pr);
            let fd0 = (f(0.3 + h, &beta) - f(0.3 - h, &beta)) / (2.0 * h);
            assert!((fd0 - d0).abs() <= 1e-6 * d0.abs().max(1e-3));
            for k in 0..8 {
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[k] += h;
                bm[k] -= h;
                let fd = (f(0.3, &bp) - f(0.3, &bm)) / (2.0 * h);
                assert!((fd - d[k]).abs() <= 1e-6 * d[k].abs().max(1e-3), "seed {seed} k {k}: {fd} vs {}", d[k]);
            }
        }
    }

    #[test]
    fn weights_must_sum_to_one_per_stay() {
        let mut rows = random_problem(2, 3, 3, 2);
        rows[0].weight += 0.1;
        assert!(FitProblem::new(&rows, 2).is_err());
    }

    #[test]
    fn lambda_max_behaviour() {
        let rows = random_problem(3, 10, 4, 5);
        let pr = FitProblem::new(&rows, 5).unwrap();
        let lm = lambda_max(&pr);
        let at = fit(&pr, lm.lambda, None, &FitOptions::default());
        assert_eq!(at.support(), 0);
        assert_eq!(at.intercept, lm.intercept);
        let below = fit(&pr, 0.99 * lm.lambda, None, &FitOptions::default());
        assert!(below.support() >= 1);

        let doubled: Vec<DesignRow> = rows
            .iter()
            .map(|r| DesignRow {
                x: r.x.iter().map(|v| 2.0 * v).collect(),
                ..r.clone()
            })
            .collect();
        let pr2 = FitProblem::new(&doubled, 5).unwrap();
        assert!((lambda_max(&pr2).lambda - 2.0 * lm.lambda).abs() < 1e-12);

        // intercept at λ_max is the weighted log-odds
        let sw: f64 = rows.iter().map(|r| r.weight).sum();
        let swy: f64 = rows.iter().filter(|r| r.positive).map(|r| r.weight).sum();
        assert!((lm.intercept - (swy / (sw - swy)).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_class_lambda_max_is_zero() {
        let rows: Vec<DesignRow> = random_problem(4, 6, 2, 2).into_iter().filter(|r| r.positive).collect();
        let pr = FitProblem::new(&rows, 2).unwrap();
        assert_eq!(lambda_max(&pr).lambda, 0.0);
    }

    #[test]
    fn kkt_holds_at_convergence() {
        for seed in 0..10 {
            let rows = random_problem(seed, 10, 4, 8);
            let pr = FitProblem::new(&rows, 8).unwrap();
            let lm = lambda_max(&pr).lambda;
            for frac in [0.5, 0.1, 0.01] {
                let m = fit(&pr, frac * lm, None, &FitOptions::default());
                assert!(m.converged);
                assert!(kkt_violation(&m, &pr) < 1e-5, "seed {seed}: {}", kkt_violation(&m, &pr));
            }
        }
    }

    /// Unpenalized Newton–Raphson on the same loss (dense, small p).
    fn newton(pr: &FitProblem) -> (f64, Vec<f64>) {
        let p = pr.p;
        let n = pr.n_rows();
        let mut dense = vec![vec![0.0; p + 1]; n];
        for row in dense.iter_mut() {
            row[0] = 1.0;
        }
        for (k, c) in pr.cols.iter().enumerate() {
            for &(i, v) in c {
                dense[i as usize][k + 1] = v;
            }
        }
        let mut theta = vec![0.0; p + 1];
        for _ in 0..100 {
            let mut g = vec![0.0; p + 1];
            let mut hmat = vec![vec![0.0; p + 1]; p + 1];
            for i in 0..n {
                let h: f64 = dense[i].iter().zip(&theta).map(|(a, b)| a * b).sum();
                let mu = sigmoid(h);
                for a in 0..=p {
                    g[a] += pr.w[i] * (mu - pr.y[i]) * dense[i][a];
                    for b in 0..=p {
                        hmat[a][b] += pr.w[i] * mu * (1.0 - mu) * dense[i][a] * dense[i][b];
                    }
                }
            }
            // solve hmat · step = g by Gaussian elimination with partial pivoting
            let mut aug: Vec<Vec<f64>> = hmat.iter().zip(&g).map(|(r, gi)| r.iter().copied().chain([*gi]).collect()).collect();
            for col in 0..=p {
                let piv = (col..=p).max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs())).unwrap();
                aug.swap(col, piv);
                for r in 0..=p {
                    if r != col {
                        let f = aug[r][col] / aug[col][col];
                        for c in col..=p + 1 {
                            aug[r][c] -= f * aug[col][c];
                        }
                    }
                }
            }
            for a in 0..=p {
                theta[a] -= aug[a][p + 1] / aug[a][a];
            }
        }
        (theta[0], theta[1..].to_vec())
    }

    #[test]
    fn unpenalized_fit_matches_newton() {
        for seed in 0..5 {
            let rows = random_problem(seed + 50, 40, 4, 3);
            let pr = FitProblem::new(&rows, 3).unwrap();
            let m = fit(&pr, 0.0, None, &tight());
            let (d0, d) = gradient_smooth(&m, &pr);
            assert!(d.iter().fold(d0.abs(), |a, g| a.max(g.abs())) < 1e-8);
            let (b0, b) = newton(&pr);
            assert!((m.intercept - b0).abs() < 1e-5);
            for (x, y) in m.beta.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5, "seed {seed}: {x} vs {y}");
            }
        }
    }

    /// Grid-plus-refinement search over β ∈ [−5, 5]², minimizing the
    /// intercept exactly (1-D Newton) at each point.
    fn brute_force_p2(pr: &FitProblem, lambda: f64) -> f64 {
        let eval = |b1: f64, b2: f64| {
            let mut b0 = 0.0;
            for _ in 0..50 {
                let m = GlmFit::new(b0, vec![b1, b2], 0.0);
                let eta = pr.linear_predictor(b0, &m.beta);
                let (g, _) = gradient_at(pr, &eta);
                let h: f64 = eta.iter().zip(&pr.w).map(|(&e, &w)| w * sigmoid(e) * (1.0 - sigmoid(e))).sum::<f64>()
                    / pr.n_stays as f64;
                b0 -= g / h;
            }
            objective(&GlmFit::new(b0, vec![b1, b2], lambda), pr)
        };
        let (mut c1, mut c2, mut half) = (0.0, 0.0, 5.0);
        let steps = 40;
        for _ in 0..40 {
            let mut best = (f64::INFINITY, c1, c2);
            for i in 0..=steps {
                for j in 0..=steps {
                    let b1 = c1 - half + 2.0 * half * i as f64 / steps as f64;
                    let b2 = c2 - half + 2.0 * half * j as f64 / steps as f64;
                    let v = eval(b1, b2);
                    if v < best.0 {
                        best = (v, b1, b2);
                    }
                }
            }
            // snap to the axes as candidates too: the lasso optimum often sits there
            for (b1, b2) in [(0.0, best.2), (best.1, 0.0), (0.0, 0.0)] {
                let v = eval(b1, b2);
                if v < best.0 {
                    best = (v, b1, b2);
                }
            }
            c1 = best.1;
            c2 = best.2;
            half *= 0.25;
        }
        eval(c1, c2)
    }

    #[test]
    fn p2_matches_brute_force() {
        for seed in 0..3 {
            let rows = random_problem(seed + 7, 12, 3, 2);
            let pr = FitProblem::new(&rows, 2).unwrap();
            let m = fit(&pr, 0.05, None, &tight());
            let oracle = brute_force_p2(&pr, 0.05);
            let got = objective(&m, &pr);
            assert!(got <= oracle + 1e-6 && oracle <= got + 1e-6, "seed {seed}: {got} vs {oracle}");
        }
    }

    #[test]
    fn separable_data_stays_finite_and_monotone() {
        let rows: Vec<DesignRow> = (0..10)
            .map(|s| DesignRow {
                x: vec![if s % 2 == 0 { 1.0 } else { -1.0 }, (s as f64 * 0.37).sin()],
                weight: 1.0,
                positive: s % 2 == 0,
                stay_id: Arc::from(format!("{s}").as_str()),
                bin: 0,
            })
            .collect();
        let pr = FitProblem::new(&rows, 2).unwrap();
        let opts = FitOptions {
            record_trace: true,
            ..Default::default()
        };
        let m = fit(&pr, 0.01, None, &opts);
        assert!(m.beta.iter().all(|b| b.is_finite()) && m.intercept.is_finite());
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn path_starts_empty_and_warm_start_pays() {
        let rows = random_problem(9, 30, 5, 8);
        let pr = FitProblem::new(&rows, 8).unwrap();
        let path = fit_path(&pr, &PathConfig::default(), &FitOptions::default());
        assert_eq!(path.fits[0].support(), 0);
        assert_eq!(path.lambdas.len(), 50);
        assert!(path.lambdas.windows(2).all(|w| w[1] < w[0]));
        let cold: usize = path.lambdas.iter().map(|&l| fit(&pr, l, None, &FitOptions::default()).sweeps).sum();
        let warm = path.total_sweeps();
        assert!(warm < 3 * cold, "warm {warm} cold {cold}");
        assert!(warm < cold, "warm {warm} cold {cold}");
    }

    #[test]
    fn support_mostly_grows_along_path() {
        let (mut steps, mut growing) = (0, 0);
        for seed in 0..20 {
            let rows = random_problem(seed + 300, 20, 4, 8);
            let pr = FitProblem::new(&rows, 8).unwrap();
            let path = fit_path(&pr, &PathConfig::default(), &FitOptions::default());
            for w in path.fits.windows(2) {
                steps += 1;
                if w[1].support() >= w[0].support() {
                    growing += 1;
                }
            }
        }
        assert!(growing as f64 >= 0.9 * steps as f64, "{growing}/{steps}");
    }

    #[test]
    fn row_order_does_not_matter() {
        let rows = random_problem(12, 10, 4, 4);
        let pr = FitProblem::new(&rows, 4).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let pr2 = FitProblem::new(&rev, 4).unwrap();
        let lm = lambda_max(&pr).lambda;
        let a = fit(&pr, 0.1 * lm, None, &tight());
        let b = fit(&pr2, 0.1 * lm, None, &tight());
        assert!((a.intercept - b.intercept).abs() < 1e-8);
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    fn encoded(rows: Vec<DesignRow>) -> Vec<EncodedStay> {
        let mut by: Vec<EncodedStay> = Vec::new();
        for r in rows {
            match by.iter_mut().find(|s| s.stay_id == r.stay_id) {
                Some(s) => {
                    s.eval.push(r.clone());
                    s.train.push(r);
                }
                None => by.push(EncodedStay {
                    stay_id: r.stay_id.clone(),
                    positive: r.positive,
                    event_time: r.positive.then_some(10_000),
                    eval: vec![r.clone()],
                    train: vec![r],
                }),
            }
        }
        by
    }

    #[test]
    fn cv_smoke_and_determinism() {
        let rows = random_problem(21, 4, 3, 3);
        let stays = encoded(rows.clone());
        let pr = FitProblem::new(&rows, 3).unwrap();
        let grid = lambda_grid(lambda_max(&pr).lambda, &PathConfig { n_lambdas: 10, ..Default::default() });
        let labels: Vec<_> = stays
            .iter()
            .map(|s| crate::cohort::StayLabel {
                stay_id: s.stay_id.to_string(),
                positive: s.positive,
                event_time: s.event_time,
                end_time: 20_000,
            })
            .collect();
        let folds = crate::cohort::grouped_kfold(&labels, 2, 5).unwrap();
        let a = select_lambda_cv(&stays, &folds, &grid, 3, &FitOptions::default()).unwrap();
        let b = select_lambda_cv(&stays, &folds, &grid, 3, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(grid.contains(&a.best_lambda));
    }

    #[test]
    fn ties_select_the_larger_lambda() {
        let fold_auc = vec![vec![Some(0.5), Some(0.8), Some(0.8)], vec![Some(0.5), Some(0.8), Some(0.8)]];
        let (mean, _) = summarize_folds(&fold_auc, 3);
        assert_eq!(mean, vec![0.5, 0.8, 0.8]);
        assert_eq!(best_grid_index(&mean), Some(1));
        assert_eq!(best_grid_index(&[f64::NAN, 0.6, 0.7]), Some(2));
        assert_eq!(best_grid_index(&[f64::NAN]), None);
    }

    proptest! {
        #[test]
        fn objective_is_convex(seed in 0u64..1000, t in 0.01f64..0.99) {
            let rows = random_problem(seed, 5, 3, 4);
            let pr = FitProblem::new(&rows, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut draw = || GlmFit::new(rng.random_range(-2.0..2.0), (0..4).map(|_| rng.random_range(-3.0..3.0)).collect(), 0.2);
            let (a, b) = (draw(), draw());
            let mix = GlmFit::new(
                t * a.intercept + (1.0 - t) * b.intercept,
                a.beta.iter().zip(&b.beta).map(|(x, y)| t * x + (1.0 - t) * y).collect(),
                0.2,
            );
            prop_assert!(objective(&mix, &pr) <= t * objective(&a, &pr) + (1.0 - t) * objective(&b, &pr) + 1e-10);
        }

        #[test]
        fn objective_trace_never_increases(seed in 0u64..1000, frac in 0.0f64..1.0) {
            let rows = random_problem(seed, 6, 4, 5);
            let pr = FitProblem::new(&rows, 5).unwrap();
            let lm = lambda_max(&pr).lambda;
            let m = fit(&pr, frac * lm, None, &FitOptions { record_trace: true, ..Default::default() });
            prop_assert!(m.trace.windows(2).all(|w| w[1] <= w[0] + 1e-13 * w[0].abs().max(1.0)));
        }
    }
}
