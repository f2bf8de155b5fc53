//! Legendre smoothing, RK4 integration and quasi-dynamic ODE fits.
//!
//! Each target is modeled on the scaled expression-index axis ν ∈ [-1, 1] as
//! `dy/dν = r·y + Σ_k a_k ŷ_k(ν)`, where `ŷ_k` are Legendre least-squares
//! smooths of the regulators. Rates are therefore per unit of ν. The fitted
//! trajectory splits exactly into an independent part (the integral of the
//! self term, started at the initial value) and one dependent part per
//! regulator (the integral of its term, started at zero).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ExpressionMatrix, ScaledIndex};
use crate::optim::{minimize_quasi_newton, QuasiNewtonOptions};
use crate::select::RegulatorSet;

/// Highest Legendre order accepted; binomials stay exact in u128 well past it.
pub const MAX_LEGENDRE_ORDER: usize = 40;
/// Number of uniform RK4 sub-steps spanning the whole domain.
pub const SUBSTEPS_PER_DOMAIN: f64 = 200.0;
const DOMAIN_SLACK: f64 = 1e-12;

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Coefficients of Q_r in ascending powers of ν, from
/// Q_r(ν) = 2^{-r} Σ_m (−1)^m C(r, m) C(2r−2m, r) ν^{r−2m}.
pub fn legendre_monomials(r: usize) -> Vec<f64> {
    let mut c = vec![0.0; r + 1];
    let scale = 0.5f64.powi(r as i32);
    for m in 0..=r / 2 {
        let mag = binomial(r as u128, m as u128) * binomial((2 * r - 2 * m) as u128, r as u128);
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        c[r - 2 * m] = sign * mag as f64 * scale;
    }
    c
}

fn check_order(r: usize) -> Result<()> {
    if r > MAX_LEGENDRE_ORDER {
        return Err(Error::Domain(format!(
            "Legendre order {r} exceeds the supported maximum {MAX_LEGENDRE_ORDER}"
        )));
    }
    Ok(())
}

fn check_nu(nu: f64) -> Result<f64> {
    if !(nu.abs() <= 1.0 + DOMAIN_SLACK) {
        return Err(Error::Domain(format!("nu = {nu} lies outside [-1, 1]")));
    }
    Ok(nu.clamp(-1.0, 1.0))
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Values Q_0(ν), …, Q_r(ν) by the explicit finite-sum formula.
pub fn legendre_basis(r: usize, nu: f64) -> Result<Vec<f64>> {
    check_order(r)?;
    let nu = check_nu(nu)?;
    Ok((0..=r).map(|k| horner(&legendre_monomials(k), nu)).collect())
}

/// Σ_k c_k Q_k(ν) on [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveCoefficients")]
pub struct LegendreCurve {
    pub coefficients: Vec<f64>,
    /// The same polynomial in ascending powers of ν.
    #[serde(skip)]
    monomial: Vec<f64>,
}

impl LegendreCurve {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::Validation("a Legendre curve needs at least one coefficient".into()));
        }
        check_order(coefficients.len() - 1)?;
        let mut monomial = vec![0.0; coefficients.len()];
        for (k, &ck) in coefficients.iter().enumerate() {
            for (p, q) in legendre_monomials(k).into_iter().enumerate() {
                monomial[p] += ck * q;
            }
        }
        Ok(Self {
            coefficients,
            monomial,
        })
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn eval(&self, nu: f64) -> Result<f64> {
        Ok(horner(self.monomials(), check_nu(nu)?))
    }

    /// Ascending-power coefficients of the same polynomial.
    pub fn monomials(&self) -> &[f64] {
        &self.monomial
    }
}

#[derive(Deserialize)]
struct CurveCoefficients {
    coefficients: Vec<f64>,
}

impl TryFrom<CurveCoefficients> for LegendreCurve {
    type Error = Error;

    fn try_from(raw: CurveCoefficients) -> Result<Self> {
        Self::new(raw.coefficients)
    }
}

/// Least-squares fit of `y` onto Q_0..Q_r at the scaled index values.
pub fn lop_smooth(nu: &[f64], y: &[f64], r: usize) -> Result<LegendreCurve> {
    check_order(r)?;
    if nu.len() != y.len() {
        return Err(Error::Validation(format!(
            "{} index values but {} observations",
            nu.len(),
            y.len()
        )));
    }
    let mut distinct: Vec<f64> = nu.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= r {
        return Err(Error::InsufficientData(format!(
            "order {r} smoothing needs at least {} distinct index values, got {}",
            r + 1,
            distinct.len()
        )));
    }
    let mut design = DMatrix::zeros(nu.len(), r + 1);
    for (i, &v) in nu.iter().enumerate() {
        for (k, q) in legendre_basis(r, v)?.into_iter().enumerate() {
            design[(i, k)] = q;
        }
    }
    let rhs = DVector::from_column_slice(y);
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Internal(format!("least-squares solve failed: {e}")))?;
    LegendreCurve::new(coef.iter().copied().collect())
}

/// Sub-step boundaries of one grid interval: `count` uniform pieces with the
/// end point reproduced exactly.
fn substeps(a: f64, b: f64, max_step: Option<f64>) -> usize {
    match max_step {
        Some(h) if h > 0.0 => (((b - a) / h).ceil() as usize).max(1),
        _ => 1,
    }
}

/// Classical RK4 over a strictly increasing grid. Each interval is split into
/// ⌈interval / max_step⌉ uniform sub-steps when `max_step` is given. `f`
/// writes dy/dx into its third argument.
pub fn rk4_integrate<F>(mut f: F, y0: &[f64], grid: &[f64], max_step: Option<f64>) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if grid.is_empty() {
        return Err(Error::Validation("integration grid is empty".into()));
    }
    if let Some(w) = grid.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::Validation(format!(
            "integration grid must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    let d = y0.len();
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(grid.len());
    out.push(y.clone());
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let count = substeps(a, b, max_step);
        for s in 0..count {
            let x0 = a + (b - a) * s as f64 / count as f64;
            let x1 = if s + 1 == count {
                b
            } else {
                a + (b - a) * (s + 1) as f64 / count as f64
            };
            let h = x1 - x0;
            let xm = x0 + 0.5 * h;
            f(x0, &y, &mut k1);
            tmp.iter_mut().zip(&y).zip(&k1).for_each(|((t, yi), k)| *t = yi + 0.5 * h * k);
            f(xm, &tmp, &mut k2);
            tmp.iter_mut().zip(&y).zip(&k2).for_each(|((t, yi), k)| *t = yi + 0.5 * h * k);
            f(xm, &tmp, &mut k3);
            tmp.iter_mut().zip(&y).zip(&k3).for_each(|((t, yi), k)| *t = yi + h * k);
            f(x1, &tmp, &mut k4);
            for i in 0..d {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration {
                    at: x1,
                    message: format!("state became non-finite in the step ending at {x1}"),
                });
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LvParams {
    /// V = δx − γ ln x + βy − α ln y, constant along exact orbits.
    pub fn conserved(&self, x: f64, y: f64) -> f64 {
        self.delta * x - self.gamma * x.ln() + self.beta * y - self.alpha * y.ln()
    }
}

/// Lotka–Volterra predator–prey system dx = αx − βxy, dy = δxy − γy,
/// integrated by RK4 over `grid`. Returns (prey, predator).
pub fn simulate_lv(p: LvParams, start: (f64, f64), grid: &[f64], max_step: Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if [p.alpha, p.beta, p.gamma, p.delta].iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("Lotka–Volterra parameters must be positive".into()));
    }
    let traj = rk4_integrate(
        |_, s, out| {
            out[0] = p.alpha * s[0] - p.beta * s[0] * s[1];
            out[1] = p.delta * s[0] * s[1] - p.gamma * s[1];
        },
        &[start.0, start.1],
        grid,
        max_step,
    )?;
    Ok(traj.into_iter().map(|s| (s[0], s[1])).unzip())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveMode {
    #[serde(rename = "ls")]
    LeastSquares,
    #[serde(rename = "mle", alias = "gaussian")]
    Gaussian,
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(Self::LeastSquares),
            "mle" | "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Validation(format!("unknown objective mode '{other}'"))),
        }
    }
}

fn default_max_step(grid: &[f64]) -> Option<f64> {
    Some((grid[grid.len() - 1] - grid[0]) / SUBSTEPS_PER_DOMAIN)
}

/// Trajectory of `dy/dν = r·y + Σ a_k ŷ_k(ν)` over `grid`, from `y0`.
pub fn qdode_trajectory(params: &[f64], y0: f64, curves: &[LegendreCurve], grid: &[f64]) -> Result<Vec<f64>> {
    if params.len() != curves.len() + 1 {
        return Err(Error::Validation(format!(
            "{} parameters for {} regulators",
            params.len(),
            curves.len()
        )));
    }
    let r = params[0];
    let forcing = combined_forcing(&params[1..], curves);
    let traj = rk4_integrate(
        |nu, y, out| out[0] = r * y[0] + horner(&forcing, nu),
        &[y0],
        grid,
        default_max_step(grid),
    )?;
    Ok(traj.into_iter().map(|s| s[0]).collect())
}

fn combined_forcing(a: &[f64], curves: &[LegendreCurve]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.monomials().len()).max().unwrap_or(0);
    let mut p = vec![0.0; len];
    for (ak, c) in a.iter().zip(curves) {
        p.iter_mut().zip(c.monomials()).for_each(|(pi, ci)| *pi += ak * ci);
    }
    p
}

fn sse(obs: &[f64], fit: &[f64]) -> f64 {
    obs.iter().zip(fit).map(|(o, f)| (o - f).powi(2)).sum()
}

fn mode_value(mode: ObjectiveMode, sse: f64, n: usize) -> f64 {
    match mode {
        ObjectiveMode::LeastSquares => sse,
        ObjectiveMode::Gaussian => {
            let nf = n as f64;
            0.5 * nf * ((2.0 * std::f64::consts::PI * (sse / nf).max(f64::MIN_POSITIVE)).ln() + 1.0)
        }
    }
}

/// Least-squares or profiled Gaussian negative log-likelihood of the
/// trajectory started at `obs[0]`. Integration failure yields +∞.
pub fn qdode_objective(params: &[f64], obs: &[f64], curves: &[LegendreCurve], grid: &[f64], mode: ObjectiveMode) -> f64 {
    match qdode_trajectory(params, obs[0], curves, grid) {
        Ok(fit) => mode_value(mode, sse(obs, &fit), obs.len()),
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QdOdeOptions {
    pub lop_order: usize,
    pub mode: ObjectiveMode,
    pub optimizer: QuasiNewtonOptions,
}

impl Default for QdOdeOptions {
    fn default() -> Self {
        Self {
            lop_order: 4,
            mode: ObjectiveMode::LeastSquares,
            optimizer: QuasiNewtonOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdOdeFit {
    pub target: String,
    pub self_rate: f64,
    pub regulators: Vec<String>,
    /// Coefficients a_k aligned with `regulators`.
    pub regulator_coeffs: Vec<f64>,
    pub regulator_curves: Vec<LegendreCurve>,
    /// Distinct scaled index values, ascending.
    pub grid: Vec<f64>,
    /// Raw expression index at each grid point.
    pub raw_grid: Vec<f64>,
    /// Grid position of every sample, in sample order.
    pub sample_grid_index: Vec<usize>,
    /// Target observations averaged per grid point.
    pub observed: Vec<f64>,
    pub fitted_trajectory: Vec<f64>,
    pub independent_curve: Vec<f64>,
    /// Aligned with `regulators`.
    pub dependent_curves: Vec<Vec<f64>>,
    pub sse: f64,
    pub objective: f64,
    pub mode: ObjectiveMode,
    pub iterations: usize,
    pub converged: bool,
}

impl QdOdeFit {
    pub fn coefficient(&self, regulator: &str) -> Option<f64> {
        self.regulators
            .iter()
            .position(|r| r == regulator)
            .map(|k| self.regulator_coeffs[k])
    }

    pub fn dependent_curve(&self, regulator: &str) -> Option<&[f64]> {
        self.regulators
            .iter()
            .position(|r| r == regulator)
            .map(|k| self.dependent_curves[k].as_slice())
    }

    /// Right-hand side split at grid point `i`: (total, self term, regulator terms).
    pub fn derivative_terms(&self, i: usize) -> Result<(f64, f64, Vec<f64>)> {
        let nu = self.grid[i];
        let own = self.self_rate * self.fitted_trajectory[i];
        let regs = self
            .regulator_coeffs
            .iter()
            .zip(&self.regulator_curves)
            .map(|(a, c)| Ok(a * c.eval(nu)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok((own + regs.iter().sum::<f64>(), own, regs))
    }
}

/// Distinct ascending grid with per-point averages of `y`.
struct Collapsed {
    grid: Vec<f64>,
    raw: Vec<f64>,
    sample_grid_index: Vec<usize>,
}

fn collapse(scaled: &ScaledIndex) -> Collapsed {
    let mut grid: Vec<f64> = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    let mut sample_grid_index = vec![0; scaled.len()];
    for &i in &scaled.order {
        if raw.last() != Some(&scaled.raw[i]) {
            grid.push(scaled.scaled[i]);
            raw.push(scaled.raw[i]);
        }
        sample_grid_index[i] = grid.len() - 1;
    }
    Collapsed {
        grid,
        raw,
        sample_grid_index,
    }
}

fn averaged(y: &[f64], c: &Collapsed) -> Vec<f64> {
    let mut sums = vec![0.0; c.grid.len()];
    let mut counts = vec![0usize; c.grid.len()];
    for (&g, &v) in c.sample_grid_index.iter().zip(y) {
        sums[g] += v;
        counts[g] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
}

/// Integrates the augmented state [y, independent, dependent_1..d] so that
/// the parts sum to the trajectory by linearity of each RK4 stage.
pub fn decompose_effects(
    self_rate: f64,
    coeffs: &[f64],
    curves: &[LegendreCurve],
    y0: f64,
    grid: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let d = curves.len();
    let mut start = vec![0.0; d + 2];
    start[0] = y0;
    start[1] = y0;
    let mut terms = vec![0.0; d];
    let traj = rk4_integrate(
        |nu, s, out| {
            let own = self_rate * s[0];
            for ((t, a), c) in terms.iter_mut().zip(coeffs).zip(curves) {
                *t = a * horner(c.monomials(), nu);
            }
            out[0] = own + terms.iter().sum::<f64>();
            out[1] = own;
            out[2..].copy_from_slice(&terms);
        },
        &start,
        grid,
        default_max_step(grid),
    )?;
    let total = traj.iter().map(|s| s[0]).collect();
    let independent = traj.iter().map(|s| s[1]).collect();
    let dependent = (0..d).map(|k| traj.iter().map(|s| s[k + 2]).collect()).collect();
    Ok((total, independent, dependent))
}

/// Fits the qdODE of `target` driven by its regulators, starting from zero
/// parameters. `scaled` supplies the index axis and may come from a larger
/// matrix than `matrix`.
pub fn fit_qdode(
    matrix: &ExpressionMatrix,
    scaled: &ScaledIndex,
    target: &str,
    regulators: &RegulatorSet,
    opts: &QdOdeOptions,
) -> Result<QdOdeFit> {
    if scaled.len() != matrix.n_samples() {
        return Err(Error::Validation(format!(
            "index has {} samples but matrix has {}",
            scaled.len(),
            matrix.n_samples()
        )));
    }
    let t = matrix
        .variable_position(target)
        .ok_or_else(|| Error::Domain(format!("unknown target '{target}'")))?;
    let ids: Vec<String> = regulators.ids().into_iter().map(String::from).collect();
    let mut curves = Vec::with_capacity(ids.len());
    for id in &ids {
        if id == target {
            return Err(Error::Validation(format!("'{target}' cannot regulate itself")));
        }
        let j = matrix
            .variable_position(id)
            .ok_or_else(|| Error::Domain(format!("unknown regulator '{id}' for '{target}'")))?;
        curves.push(lop_smooth(&scaled.scaled, matrix.row(j), opts.lop_order)?);
    }
    let collapsed = collapse(scaled);
    if collapsed.grid.len() < 2 {
        return Err(Error::Degenerate("index has fewer than two distinct values".into()));
    }
    let observed = averaged(matrix.row(t), &collapsed);
    let grid = &collapsed.grid;
    let objective = |p: &[f64]| qdode_objective(p, &observed, &curves, grid, opts.mode);
    let x0 = vec![0.0; ids.len() + 1];
    let res = minimize_quasi_newton(objective, &x0, opts.optimizer).map_err(|e| match e {
        Error::Optimization {
            message,
            best_x,
            iterations,
            ..
        } => {
            let best_sse = qdode_trajectory(&best_x, observed[0], &curves, grid)
                .map(|f| sse(&observed, &f))
                .unwrap_or(f64::INFINITY);
            Error::Optimization {
                message: format!("qdODE fit of '{target}' failed: {message} (best SSE {best_sse:e})"),
                best_x,
                best_f: best_sse,
                iterations,
            }
        }
        other => other,
    })?;
    if !res.converged {
        log::warn!(
            "qdODE fit of '{target}' stopped after {} iterations with gradient norm {:?}",
            res.iterations,
            res.gradient_norm
        );
    }
    let (fitted, independent, dependent) = decompose_effects(res.x[0], &res.x[1..], &curves, observed[0], grid)?;
    let fit_sse = sse(&observed, &fitted);
    Ok(QdOdeFit {
        target: target.to_string(),
        self_rate: res.x[0],
        regulators: ids,
        regulator_coeffs: res.x[1..].to_vec(),
        regulator_curves: curves,
        grid: collapsed.grid.clone(),
        raw_grid: collapsed.raw.clone(),
        sample_grid_index: collapsed.sample_grid_index.clone(),
        observed,
        fitted_trajectory: fitted,
        independent_curve: independent,
        dependent_curves: dependent,
        sse: fit_sse,
        objective: res.f,
        mode: opts.mode,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Fits every target concurrently on a pool of `jobs` threads. Results keep
/// the order of `sets`.
pub fn fit_all(
    matrix: &ExpressionMatrix,
    scaled: &ScaledIndex,
    sets: &[RegulatorSet],
    opts: &QdOdeOptions,
    jobs: usize,
) -> Result<Vec<Result<QdOdeFit>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        sets.par_iter()
            .map(|s| fit_qdode(matrix, scaled, &s.target, s, opts))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{scale_index, LoadOptions};
    use crate::select::Regulator;
    use proptest::prelude::*;

    /// Gauss–Legendre nodes and weights by Newton iteration on P_n.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    #[test]
    fn legendre_closed_forms() {
        for i in 0..=20 {
            let nu = -1.0 + 0.1 * i as f64;
            let b = legendre_basis(2, nu).unwrap();
            assert_eq!(b[0], 1.0);
            assert_eq!(b[1], nu.clamp(-1.0, 1.0));
            assert!((b[2] - (3.0 * nu * nu - 1.0) / 2.0).abs() < 1e-15);
        }
        assert_eq!(legendre_basis(2, 0.5).unwrap()[2], -0.125);
        assert!(matches!(legendre_basis(3, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn legendre_recurrence() {
        for i in 0..=100 {
            let nu = -1.0 + 0.02 * i as f64;
            let q = legendre_basis(11, nu).unwrap();
            for k in 1..=10 {
                let lhs = (k + 1) as f64 * q[k + 1];
                let rhs = (2 * k + 1) as f64 * nu * q[k] - k as f64 * q[k - 1];
                assert!((lhs - rhs).abs() < 1e-12, "k={k} nu={nu}");
            }
        }
    }

    #[test]
    fn legendre_orthogonality_by_quadrature() {
        let nodes = gauss_legendre(64);
        let vals: Vec<Vec<f64>> = nodes.iter().map(|(x, _)| legendre_basis(6, *x).unwrap()).collect();
        for i in 0..=6 {
            for j in 0..=6 {
                let ip: f64 = vals.iter().zip(&nodes).map(|(v, (_, w))| w * v[i] * v[j]).sum();
                if i == j {
                    assert!((ip - 2.0 / (2 * i + 1) as f64).abs() < 1e-10);
                } else {
                    assert!(ip.abs() < 1e-10, "<Q{i},Q{j}> = {ip}");
                }
            }
        }
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn smoothing_examples() {
        let nu = grid(12);
        let c = lop_smooth(&nu, &vec![3.5; 12], 4).unwrap();
        assert!((c.coefficients[0] - 3.5).abs() < 1e-12);
        assert!(c.coefficients[1..].iter().all(|v| v.abs() < 1e-12));

        let y: Vec<f64> = nu.iter().map(|v| 2.0 * v).collect();
        let c = lop_smooth(&nu, &y, 3).unwrap();
        for (a, b) in c.coefficients.iter().zip([0.0, 2.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(matches!(lop_smooth(&nu[..3], &y[..3], 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn smoothing_matches_normal_equations() {
        let nu = grid(50);
        let y: Vec<f64> = nu.iter().map(|v| (std::f64::consts::PI * v).sin()).collect();
        let c = lop_smooth(&nu, &y, 4).unwrap();
        // Oracle: normal equations in the monomial basis.
        let x = DMatrix::from_fn(50, 5, |i, k| nu[i].powi(k as i32));
        let b = DVector::from_column_slice(&y);
        let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * b));
        let mut residual = vec![0.0; 50];
        for (i, &v) in nu.iter().enumerate() {
            let oracle: f64 = (0..5).map(|k| beta[k] * v.powi(k as i32)).sum();
            let fit = c.eval(v).unwrap();
            assert!((fit - oracle).abs() < 1e-6);
            residual[i] = y[i] - fit;
        }
        for k in 0..=4 {
            let dot: f64 = nu.iter().zip(&residual).map(|(v, r)| legendre_basis(4, *v).unwrap()[k] * r).sum();
            assert!(dot.abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_zero_field_and_exponential() {
        let g: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let flat = rk4_integrate(|_, _, out| out[0] = 0.0, &[2.0], &g, None).unwrap();
        assert!(flat.iter().all(|s| s[0] == 2.0));
        let decay = rk4_integrate(|_, y, out| out[0] = -y[0], &[1.0], &g, None).unwrap();
        assert!((decay.last().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_fourth_order() {
        let err = |steps: usize| {
            let g: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
            let t = rk4_integrate(|_, y, out| out[0] = -y[0], &[1.0], &g, None).unwrap();
            (t.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let errors: Vec<f64> = [10, 20, 40, 80].iter().map(|&s| err(s)).collect();
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn rk4_reports_non_finite_state() {
        let g = [0.0, 0.5, 1.0, 1.5];
        match rk4_integrate(|x, _, out| out[0] = if x > 0.6 { f64::NAN } else { 1.0 }, &[0.0], &g, None) {
            Err(Error::Integration { at, .. }) => assert_eq!(at, 1.0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(rk4_integrate(|_, _, o| o[0] = 0.0, &[0.0], &[0.0, 0.0], None).is_err());
    }

    #[test]
    fn lv_fixed_points() {
        let g: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let p = LvParams { alpha: 2.0, beta: 1.0, gamma: 1.5, delta: 0.5 };
        let (x, y) = simulate_lv(p, (p.gamma / p.delta, p.alpha / p.beta), &g, Some(0.01)).unwrap();
        assert!(x.iter().all(|v| (v - 3.0).abs() < 1e-9));
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-9));
        let ones = LvParams { alpha: 1.0, beta: 1.0, gamma: 1.0, delta: 1.0 };
        let (x, y) = simulate_lv(ones, (1.0, 1.0), &g, None).unwrap();
        assert!(x.iter().chain(&y).all(|v| (v - 1.0).abs() < 1e-9));
    }

    /// Time between successive upward crossings of the starting prey level.
    fn lv_period(p: LvParams, start: (f64, f64), h: f64) -> f64 {
        let g: Vec<f64> = (0..=40_000).map(|i| i as f64 * h).collect();
        let (x, _) = simulate_lv(p, start, &g, None).unwrap();
        let mut crossings = Vec::new();
        for i in 1..x.len() {
            if x[i - 1] < start.0 && x[i] >= start.0 {
                let frac = (start.0 - x[i - 1]) / (x[i] - x[i - 1]);
                crossings.push(g[i - 1] + frac * h);
            }
        }
        crossings[1] - crossings[0]
    }

    fn max_drift(p: LvParams, start: (f64, f64), horizon: f64, h: f64) -> f64 {
        let steps = (horizon / h).ceil() as usize;
        let g: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();
        let (x, y) = simulate_lv(p, start, &g, None).unwrap();
        let v0 = p.conserved(start.0, start.1);
        x.iter().zip(&y).map(|(a, b)| (p.conserved(*a, *b) - v0).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn lv_conserved_quantity_over_one_orbit() {
        let p = LvParams { alpha: 2.0, beta: 1.0, gamma: 1.0, delta: 1.0 };
        // (1, 2) is the equilibrium of these parameters; integrate over the
        // small-oscillation period 2π/√(αγ).
        let small = 2.0 * std::f64::consts::PI / (p.alpha * p.gamma).sqrt();
        assert!(max_drift(p, (1.0, 2.0), small, 1e-3) < 1e-5);
        let start = (2.0, 1.0);
        let period = lv_period(p, start, 1e-3);
        let drift = max_drift(p, start, period, 1e-3);
        assert!(drift < 1e-5, "drift {drift}");
    }

    /// Generates y' = r y + a ŷ(ν) with ŷ an exact Legendre curve.
    fn synthetic(r: f64, a: &[f64], curves: &[LegendreCurve], y0: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let g = grid(n);
        let mut p = vec![r];
        p.extend_from_slice(a);
        let y = qdode_trajectory(&p, y0, curves, &g).unwrap();
        (g, y)
    }

    #[test]
    fn objective_zero_params_and_true_params() {
        let curve = LegendreCurve::new(vec![1.0, 0.5, -0.2]).unwrap();
        let (g, y) = synthetic(0.3, &[0.8], std::slice::from_ref(&curve), 2.0, 25);
        let zero = qdode_objective(&[0.0, 0.0], &y, std::slice::from_ref(&curve), &g, ObjectiveMode::LeastSquares);
        let expected: f64 = y.iter().map(|v| (v - y[0]).powi(2)).sum();
        assert!((zero - expected).abs() < 1e-12 * expected.max(1.0));
        let truth = qdode_objective(&[0.3, 0.8], &y, std::slice::from_ref(&curve), &g, ObjectiveMode::LeastSquares);
        assert!(truth < 1e-10);
        for dr in [-1e-3, 0.0, 1e-3] {
            for da in [-1e-3, 0.0, 1e-3] {
                let v = qdode_objective(&[0.3 + dr, 0.8 + da], &y, std::slice::from_ref(&curve), &g, ObjectiveMode::LeastSquares);
                assert!(truth <= v);
            }
        }
    }

    /// Linear pair y1' = r1 y1 + a12 y2, y2' = −6 a12 y1 integrated in ν.
    /// The coupling makes the pair oscillate, so the two trajectories are far
    /// from collinear. A balancing row makes the column sums affine in ν, so
    /// the recovered index axis is exactly ν.
    fn two_variable_matrix(r1: f64, a12: f64, n: usize) -> (ExpressionMatrix, ScaledIndex) {
        let g = grid(n);
        let traj = rk4_integrate(
            |_, y, o| {
                o[0] = r1 * y[0] + a12 * y[1];
                o[1] = -6.0 * a12 * y[0];
            },
            &[5.0, 3.0],
            &g,
            Some(1e-4),
        )
        .unwrap();
        let y1: Vec<f64> = traj.iter().map(|s| s[0]).collect();
        let y2: Vec<f64> = traj.iter().map(|s| s[1]).collect();
        let e: Vec<f64> = g.iter().map(|v| 1000.0 + 100.0 * v).collect();
        let rest: Vec<f64> = (0..n).map(|i| e[i] - y1[i] - y2[i]).collect();
        let m = ExpressionMatrix::new(
            vec!["y1".into(), "y2".into(), "rest".into()],
            (0..n).map(|i| format!("s{i}")).collect(),
            vec![y1, y2, rest],
            LoadOptions { allow_negative: true },
        )
        .unwrap();
        let s = scale_index(m.index()).unwrap();
        (m, s)
    }

    fn regs(target: &str, ids: &[&str]) -> RegulatorSet {
        RegulatorSet {
            target: target.into(),
            regulators: ids.iter().map(|id| Regulator { id: id.to_string(), coefficient: 1.0 }).collect(),
            lambda_used: 0.0,
            cv_curve: vec![],
        }
    }

    #[test]
    fn two_variable_recovery() {
        let opts = QdOdeOptions { lop_order: 6, ..Default::default() };
        for a12 in [0.5, -0.5] {
            let (m, s) = two_variable_matrix(0.1, a12, 30);
            for (a, b) in s.scaled.iter().zip(grid(30)) {
                assert!((a - b).abs() < 1e-12);
            }
            let fit = fit_qdode(&m, &s, "y1", &regs("y1", &["y2"]), &opts).unwrap();
            assert!((fit.self_rate - 0.1).abs() < 1e-3, "r = {}", fit.self_rate);
            assert!((fit.regulator_coeffs[0] - a12).abs() < 1e-3, "a = {}", fit.regulator_coeffs[0]);
            assert_eq!(fit.fitted_trajectory[0], fit.observed[0]);
            assert_eq!(fit.independent_curve[0], fit.observed[0]);
            assert_eq!(fit.dependent_curves[0][0], 0.0);
        }
    }

    #[test]
    fn isolated_target_and_additivity() {
        let (m, s) = two_variable_matrix(0.2, 0.3, 25);
        let fit = fit_qdode(&m, &s, "y1", &RegulatorSet::empty("y1"), &QdOdeOptions::default()).unwrap();
        assert!(fit.dependent_curves.is_empty());
        assert_eq!(fit.fitted_trajectory, fit.independent_curve);

        let fit = fit_qdode(&m, &s, "rest", &regs("rest", &["y1", "y2"]), &QdOdeOptions::default()).unwrap();
        for i in 0..fit.grid.len() {
            let total = fit.independent_curve[i] + fit.dependent_curves.iter().map(|c| c[i]).sum::<f64>();
            assert!((total - fit.fitted_trajectory[i]).abs() < 1e-8);
            let (rhs, own, terms) = fit.derivative_terms(i).unwrap();
            assert!((rhs - own - terms.iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn curve_json_round_trip_restores_evaluation() {
        let c = LegendreCurve::new(vec![0.5, -1.0, 0.25]).unwrap();
        let back: LegendreCurve = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.eval(0.3).unwrap(), c.eval(0.3).unwrap());
    }

    #[test]
    fn decomposition_special_cases() {
        let curve = LegendreCurve::new(vec![1.0, -0.4]).unwrap();
        let g = grid(15);
        let (total, ind, dep) = decompose_effects(0.7, &[0.0], std::slice::from_ref(&curve), 2.0, &g).unwrap();
        assert_eq!(total, ind);
        assert!(dep[0].iter().all(|v| *v == 0.0));
        let (_, ind, _) = decompose_effects(0.0, &[1.3], std::slice::from_ref(&curve), 2.0, &g).unwrap();
        assert!(ind.iter().all(|v| *v == 2.0));
    }

    #[test]
    fn ls_and_gaussian_share_minimizer() {
        let (m, s) = two_variable_matrix(0.15, -0.35, 20);
        // Perturb the target so the minimum SSE is positive.
        let mut rows: Vec<Vec<f64>> = m.rows().map(<[f64]>::to_vec).collect();
        for (i, v) in rows[0].iter_mut().enumerate() {
            *v += 0.05 * ((i * 7919) % 13) as f64 / 13.0 - 0.025;
        }
        let m = ExpressionMatrix::new(m.variable_ids().to_vec(), m.sample_ids().to_vec(), rows, LoadOptions { allow_negative: true }).unwrap();
        let fine = QuasiNewtonOptions { fd_step: 1e-8, grad_tol: 1e-10, ..Default::default() };
        let ls = fit_qdode(&m, &s, "y1", &regs("y1", &["y2"]), &QdOdeOptions { lop_order: 5, optimizer: fine, mode: ObjectiveMode::LeastSquares }).unwrap();
        let ml = fit_qdode(&m, &s, "y1", &regs("y1", &["y2"]), &QdOdeOptions { lop_order: 5, optimizer: fine, mode: ObjectiveMode::Gaussian }).unwrap();
        assert!((ls.self_rate - ml.self_rate).abs() < 1e-6, "{} vs {}", ls.self_rate, ml.self_rate);
        assert!((ls.regulator_coeffs[0] - ml.regulator_coeffs[0]).abs() < 1e-6);
    }

    #[test]
    fn duplicate_index_values_are_averaged() {
        let m = ExpressionMatrix::new(
            vec!["a".into(), "b".into()],
            (0..5).map(|i| format!("s{i}")).collect(),
            vec![vec![1.0, 3.0, 2.0, 5.0, 4.0], vec![1.0, 1.0, 4.0, 5.0, 8.0]],
            LoadOptions::default(),
        )
        .unwrap();
        // Column sums 2, 4, 6, 10, 12 are distinct; force duplicates instead.
        let s = scale_index(&[2.0, 4.0, 4.0, 10.0, 12.0]).unwrap();
        let fit = fit_qdode(&m, &s, "a", &RegulatorSet::empty("a"), &QdOdeOptions::default()).unwrap();
        assert_eq!(fit.grid.len(), 4);
        assert_eq!(fit.observed, vec![1.0, 2.5, 5.0, 4.0]);
        assert_eq!(fit.sample_grid_index, vec![0, 1, 1, 2, 3]);
    }

    #[test]
    fn parallel_fits_match_sequential() {
        let (m, s) = two_variable_matrix(0.1, 0.5, 20);
        let sets = vec![regs("y1", &["y2"]), regs("y2", &["y1"]), regs("rest", &["y1", "y2"])];
        let par = fit_all(&m, &s, &sets, &QdOdeOptions::default(), 3).unwrap();
        for (set, f) in sets.iter().zip(par) {
            let seq = fit_qdode(&m, &s, &set.target, set, &QdOdeOptions::default()).unwrap();
            assert_eq!(f.unwrap(), seq);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn decomposition_is_additive(r in -1.0f64..1.0, a in proptest::collection::vec(-2.0f64..2.0, 0..4), y0 in -5.0f64..5.0) {
            let curves: Vec<LegendreCurve> = (0..a.len())
                .map(|k| LegendreCurve::new(vec![1.0, 0.3 * k as f64, -0.2, 0.1]).unwrap())
                .collect();
            let g = grid(17);
            let (total, ind, dep) = decompose_effects(r, &a, &curves, y0, &g).unwrap();
            for i in 0..g.len() {
                let s = ind[i] + dep.iter().map(|c| c[i]).sum::<f64>();
                prop_assert!((s - total[i]).abs() < 1e-8 * total[i].abs().max(1.0));
            }
            let mut p = vec![r];
            p.extend_from_slice(&a);
            let direct = qdode_trajectory(&p, y0, &curves, &g).unwrap();
            for (x, y) in direct.iter().zip(&total) {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
