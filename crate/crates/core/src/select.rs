//! LASSO by cyclic coordinate descent, and cross-validated selection of the
//! regulators acting on a target variable.
//!
//! Predictors are standardized internally (zero mean, unit variance with
//! divisor N) and the response is centered, so the unpenalized intercept
//! drops out of the coordinate updates. Coefficients are reported on the
//! original predictor scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ExpressionMatrix;

const CD_TOL: f64 = 1e-13;
const CD_MAX_SWEEPS: usize = 200_000;
const ZERO_VARIANCE: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    /// Coefficients on the original predictor scale.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Coefficients on the standardized scale (the ones the penalty sees).
    pub standardized: Vec<f64>,
    pub lambda: f64,
    pub sweeps: usize,
    pub warnings: Vec<String>,
    /// Objective value after each full sweep, standardized problem.
    pub objective_trace: Vec<f64>,
}

/// Column-standardized copy of a design matrix.
#[derive(Debug, Clone)]
pub struct Standardized {
    /// Column-major standardized predictors; zero-variance columns are all zero.
    pub columns: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub constant: Vec<bool>,
    pub y_centered: Vec<f64>,
    pub y_mean: f64,
}

impl Standardized {
    /// `x` is given as n rows of p predictors.
    pub fn new(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = y.len();
        if x.len() != n {
            return Err(Error::Validation(format!(
                "design has {} rows but response has {n}",
                x.len()
            )));
        }
        if n < 2 {
            return Err(Error::InsufficientData(format!("lasso needs n >= 2, got {n}")));
        }
        let p = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != p) {
            return Err(Error::Validation("design rows have unequal length".into()));
        }
        let nf = n as f64;
        let mut columns = Vec::with_capacity(p);
        let mut means = Vec::with_capacity(p);
        let mut scales = Vec::with_capacity(p);
        let mut constant = Vec::with_capacity(p);
        for k in 0..p {
            let mean = x.iter().map(|r| r[k]).sum::<f64>() / nf;
            let var = x.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / nf;
            let is_const = var <= ZERO_VARIANCE * mean.abs().max(1.0).powi(2);
            let scale = if is_const { 1.0 } else { var.sqrt() };
            columns.push(
                x.iter()
                    .map(|r| if is_const { 0.0 } else { (r[k] - mean) / scale })
                    .collect(),
            );
            means.push(mean);
            scales.push(scale);
            constant.push(is_const);
        }
        let y_mean = y.iter().sum::<f64>() / nf;
        Ok(Self {
            columns,
            means,
            scales,
            constant,
            y_centered: y.iter().map(|v| v - y_mean).collect(),
            y_mean,
        })
    }

    pub fn n(&self) -> usize {
        self.y_centered.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    /// Smallest λ at which every coefficient is zero: max_k |z_kᵀy| / N.
    pub fn lambda_max(&self) -> f64 {
        let nf = self.n() as f64;
        self.columns
            .iter()
            .map(|c| dot(c, &self.y_centered).abs() / nf)
            .fold(0.0, f64::max)
    }

    /// Residual y_c − Zβ for standardized coefficients.
    pub fn residual(&self, beta: &[f64]) -> Vec<f64> {
        let mut r = self.y_centered.clone();
        for (c, &b) in self.columns.iter().zip(beta) {
            if b != 0.0 {
                r.iter_mut().zip(c).for_each(|(ri, zi)| *ri -= b * zi);
            }
        }
        r
    }

    /// (1/2N)‖y_c − Zβ‖² + λ‖β‖₁.
    pub fn objective(&self, beta: &[f64], lambda: f64) -> f64 {
        let r = self.residual(beta);
        dot(&r, &r) / (2.0 * self.n() as f64) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Largest violation of the LASSO optimality conditions.
    pub fn kkt_violation(&self, beta: &[f64], lambda: f64) -> f64 {
        let r = self.residual(beta);
        let nf = self.n() as f64;
        self.columns
            .iter()
            .zip(beta)
            .zip(&self.constant)
            .filter(|(_, &c)| !c)
            .map(|((col, &b), _)| {
                let grad = dot(col, &r) / nf;
                if b != 0.0 {
                    (grad - lambda * b.signum()).abs()
                } else {
                    (grad.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Coordinate descent from `warm` (standardized scale).
    fn descend(&self, lambda: f64, warm: Option<&[f64]>) -> (Vec<f64>, usize, Vec<f64>) {
        let p = self.p();
        let nf = self.n() as f64;
        let mut beta = warm.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
        let mut r = self.residual(&beta);
        let mut trace = Vec::new();
        let mut sweeps = 0;
        while sweeps < CD_MAX_SWEEPS {
            let mut max_delta = 0.0f64;
            for k in 0..p {
                if self.constant[k] {
                    beta[k] = 0.0;
                    continue;
                }
                let col = &self.columns[k];
                let old = beta[k];
                // Columns have unit variance, so z_kᵀz_k / N = 1.
                let rho = dot(col, &r) / nf + old;
                let new = soft_threshold(rho, lambda);
                if new != old {
                    let d = new - old;
                    r.iter_mut().zip(col).for_each(|(ri, zi)| *ri -= d * zi);
                    beta[k] = new;
                    max_delta = max_delta.max(d.abs());
                }
            }
            sweeps += 1;
            trace.push(dot(&r, &r) / (2.0 * nf) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>());
            if max_delta < CD_TOL {
                break;
            }
        }
        (beta, sweeps, trace)
    }

    pub fn fit(&self, lambda: f64, warm: Option<&[f64]>) -> Result<LassoFit> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let (standardized, sweeps, objective_trace) = self.descend(lambda, warm);
        let coefficients: Vec<f64> = standardized
            .iter()
            .zip(&self.scales)
            .map(|(b, s)| b / s)
            .collect();
        let intercept = self.y_mean
            - coefficients
                .iter()
                .zip(&self.means)
                .map(|(b, m)| b * m)
                .sum::<f64>();
        let warnings = self
            .constant
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(k, _)| format!("column {k} has zero variance; coefficient fixed at 0"))
            .collect();
        Ok(LassoFit {
            coefficients,
            intercept,
            standardized,
            lambda,
            sweeps,
            warnings,
            objective_trace,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Minimizes (1/2N)Σ(yᵢ − b₀ − xᵢᵀβ)² + λ‖β‖₁ over standardized predictors.
/// `x` holds n rows of p predictors.
pub fn lasso_fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LassoFit> {
    let fit = Standardized::new(x, y)?.fit(lambda, None)?;
    for w in &fit.warnings {
        log::warn!("lasso: {w}");
    }
    Ok(fit)
}

/// `count` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_path(lambda_max: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count == 0 || lambda_max <= 0.0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (ratio * lambda_max).ln());
    (0..count)
        .map(|i| {
            if i == 0 {
                lambda_max
            } else {
                (hi + (lo - hi) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectOptions {
    /// Explicit λ grid; the default path is used when `None`.
    pub lambda_grid: Option<Vec<f64>>,
    pub cv_folds: usize,
    pub max_regulators: usize,
    pub path_length: usize,
    pub path_ratio: f64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            lambda_grid: None,
            cv_folds: 5,
            max_regulators: 10,
            path_length: 50,
            path_ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regulator {
    pub id: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorSet {
    pub target: String,
    /// Ordered by decreasing |coefficient|.
    pub regulators: Vec<Regulator>,
    pub lambda_used: f64,
    /// Mean validation MSE per λ on the grid (descending λ order).
    pub cv_curve: Vec<(f64, f64)>,
}

impl RegulatorSet {
    pub fn empty(target: &str) -> Self {
        Self {
            target: target.to_string(),
            regulators: Vec::new(),
            lambda_used: 0.0,
            cv_curve: Vec::new(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.regulators.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.regulators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regulators.is_empty()
    }
}

/// Regresses the target on every other variable, picks λ by k-fold
/// cross-validation (fold = sample index mod k) and keeps the nonzero
/// coefficients, truncated to `max_regulators` by magnitude.
pub fn select_regulators(matrix: &ExpressionMatrix, target: &str, opts: &SelectOptions) -> Result<RegulatorSet> {
    let t = matrix
        .variable_position(target)
        .ok_or_else(|| Error::Domain(format!("unknown target '{target}'")))?;
    let n = matrix.n_samples();
    if opts.cv_folds < 2 {
        return Err(Error::Validation(format!("cv_folds must be >= 2, got {}", opts.cv_folds)));
    }
    if n < opts.cv_folds {
        return Err(Error::Validation(format!(
            "{n} samples cannot be split into {} folds",
            opts.cv_folds
        )));
    }
    let candidates: Vec<usize> = (0..matrix.n_variables()).filter(|&j| j != t).collect();
    if candidates.is_empty() {
        return Ok(RegulatorSet::empty(target));
    }
    let design: Vec<Vec<f64>> = (0..n)
        .map(|i| candidates.iter().map(|&j| matrix.get(j, i)).collect())
        .collect();
    let y = matrix.row(t).to_vec();
    let full = Standardized::new(&design, &y)?;

    let grid = match &opts.lambda_grid {
        Some(g) => {
            let mut g = g.clone();
            if g.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return Err(Error::Validation("lambda grid must be finite and nonnegative".into()));
            }
            g.sort_by(|a, b| b.total_cmp(a));
            g.dedup();
            g
        }
        None => lambda_path(full.lambda_max(), opts.path_length, opts.path_ratio),
    };
    if grid.is_empty() {
        return Ok(RegulatorSet::empty(target));
    }

    let mut mse = vec![0.0; grid.len()];
    for fold in 0..opts.cv_folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % opts.cv_folds != fold);
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| design[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let prob = Standardized::new(&tx, &ty)?;
        let mut warm: Option<Vec<f64>> = None;
        for (g, &lambda) in grid.iter().enumerate() {
            let fit = prob.fit(lambda, warm.as_deref())?;
            let err: f64 = test
                .iter()
                .map(|&i| {
                    let pred = fit.intercept + dot(&fit.coefficients, &design[i]);
                    (y[i] - pred).powi(2)
                })
                .sum::<f64>()
                / test.len() as f64;
            mse[g] += err / opts.cv_folds as f64;
            warm = Some(fit.standardized);
        }
    }
    // Ties resolve to the larger λ (earlier on the descending grid).
    let best = mse
        .iter()
        .enumerate()
        .fold(0, |b, (g, &v)| if v < mse[b] { g } else { b });
    let lambda_used = grid[best];

    // Warm-start along the path down to the chosen λ.
    let mut warm: Option<Vec<f64>> = None;
    let mut fit = None;
    for &lambda in &grid[..=best] {
        let f = full.fit(lambda, warm.as_deref())?;
        warm = Some(f.standardized.clone());
        fit = Some(f);
    }
    let fit = fit.expect("grid is non-empty");
    for w in &fit.warnings {
        log::warn!("select '{target}': {w}");
    }

    let mut regulators: Vec<Regulator> = candidates
        .iter()
        .zip(&fit.coefficients)
        .filter(|(_, &c)| c != 0.0)
        .map(|(&j, &c)| Regulator {
            id: matrix.variable_ids()[j].clone(),
            coefficient: c,
        })
        .collect();
    regulators.sort_by(|a, b| b.coefficient.abs().total_cmp(&a.coefficient.abs()));
    regulators.truncate(opts.max_regulators);

    Ok(RegulatorSet {
        target: target.to_string(),
        regulators,
        lambda_used,
        cv_curve: grid.into_iter().zip(mse).collect(),
    })
}
