//! Unconstrained minimizers: BFGS with forward-difference gradients and an
//! Armijo backtracking line search, and the Nelder–Mead simplex method.
//!
//! Non-finite objective values are never accepted. Both minimizers are
//! deterministic and keep the best value seen, so `f <= f(x0)` on return.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Forward-difference gradient norm at `x` (quasi-Newton only).
    pub gradient_norm: Option<f64>,
    /// Best objective value after each iteration; entry 0 is `f(x0)`.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiNewtonOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Relative finite-difference step: coordinate `i` moves by
    /// `fd_step * (1 + |x_i|)`.
    pub fd_step: f64,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub max_iter: usize,
    pub f_tol: f64,
    /// Largest vertex distance from the best vertex (max norm) allowed at
    /// termination, relative to `1 + |best|`.
    pub x_tol: f64,
    /// Initial simplex edge along coordinate `i` is
    /// `initial_scale * max(1, |x0_i|)`.
    pub initial_scale: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            f_tol: 1e-10,
            x_tol: 1e-6,
            initial_scale: 0.1,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

fn eval<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn fd_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    rel_step: f64,
) -> Option<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let fp = eval(f, &probe);
        let gi = if fp.is_finite() {
            (fp - fx) / h
        } else {
            // Fall back to a backward difference near a non-finite region.
            probe[i] = x[i] - h;
            let fm = eval(f, &probe);
            if !fm.is_finite() {
                return None;
            }
            (fx - fm) / h
        };
        probe[i] = x[i];
        g.push(gi);
    }
    Some(g)
}

/// BFGS on the inverse Hessian with forward-difference gradients.
pub fn minimize_quasi_newton<F>(mut objective: F, x0: &[f64], opts: QuasiNewtonOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = eval(&mut objective, &x);
    if !fx.is_finite() {
        return Err(Error::Domain(format!("objective is not finite at x0 ({fx})")));
    }
    let fail = |msg: &str, x: &[f64], f: f64, it: usize| Error::Optimization {
        message: msg.to_string(),
        best_x: x.to_vec(),
        best_f: f,
        iterations: it,
    };
    let mut g = fd_gradient(&mut objective, &x, fx, opts.fd_step)
        .ok_or_else(|| fail("gradient is not finite at x0", &x, fx, 0))?;
    let mut h_inv = identity(n);
    let mut fresh = true;
    let mut trace = vec![fx];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        if norm(&g) <= opts.grad_tol {
            converged = true;
            break;
        }
        let mut step = None;
        for attempt in 0..2 {
            let mut d = mat_vec(&h_inv, &g);
            d.iter_mut().for_each(|v| *v = -*v);
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                h_inv = identity(n);
                fresh = true;
                d = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut t = 1.0;
            let mut saw_finite = false;
            for _ in 0..MAX_HALVINGS {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                let ft = eval(&mut objective, &trial);
                if ft.is_finite() {
                    saw_finite = true;
                    if ft < fx && ft <= fx + ARMIJO_C * t * slope {
                        step = Some((trial, ft));
                        break;
                    }
                }
                t *= 0.5;
            }
            if step.is_some() {
                break;
            }
            if !saw_finite {
                return Err(fail("no finite step along the search direction", &x, fx, iterations));
            }
            if attempt == 0 && !fresh {
                h_inv = identity(n);
                fresh = true;
            } else {
                break;
            }
        }
        let Some((x_new, f_new)) = step else {
            // Line search stalled: finite-difference noise dominates.
            break;
        };
        let g_new = fd_gradient(&mut objective, &x_new, f_new, opts.fd_step)
            .ok_or_else(|| fail("gradient is not finite", &x_new, f_new, iterations + 1))?;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if fresh {
                let scale = sy / dot(&y, &y);
                h_inv = identity(n);
                h_inv.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v *= scale));
            }
            bfgs_update(&mut h_inv, &s, &y, sy);
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
        trace.push(fx);
    }
    let gn = norm(&g);
    if !converged && gn <= opts.grad_tol {
        converged = true;
    }
    Ok(OptResult {
        x,
        f: fx,
        iterations,
        converged,
        gradient_norm: Some(gn),
        trace,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ, ρ = 1/(yᵀs).
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Nelder–Mead with reflection 1, expansion 2, contraction 0.5, shrink 0.5.
pub fn minimize_simplex<F>(mut objective: F, x0: &[f64], opts: SimplexOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> f64,
{
    const REFLECT: f64 = 1.0;
    const EXPAND: f64 = 2.0;
    const CONTRACT: f64 = 0.5;
    const SHRINK: f64 = 0.5;

    let n = x0.len();
    let f0 = eval(&mut objective, x0);
    if !f0.is_finite() {
        return Err(Error::Domain(format!("objective is not finite at x0 ({f0})")));
    }
    if n == 0 {
        return Ok(OptResult {
            x: Vec::new(),
            f: f0,
            iterations: 0,
            converged: true,
            gradient_norm: None,
            trace: vec![f0],
        });
    }
    let mut pts: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += opts.initial_scale * x0[i].abs().max(1.0);
        let fp = eval(&mut objective, &p);
        pts.push((p, fp));
    }
    let order = |pts: &mut Vec<(Vec<f64>, f64)>| pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    order(&mut pts);
    let mut trace = vec![f0];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let spread = pts[n].1 - pts[0].1;
        let best = &pts[0].0;
        let diameter = pts[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(best).map(|(a, b)| (a - b).abs() / (1.0 + b.abs())))
            .fold(0.0, f64::max);
        if spread < opts.f_tol && diameter <= opts.x_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64, toward: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(toward)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let worst = pts[n].0.clone();
        let xr = along(-REFLECT, &worst);
        let fr = eval(&mut objective, &xr);
        let (best_f, second_worst_f, worst_f) = (pts[0].1, pts[n - 1].1, pts[n].1);

        let mut shrink = false;
        if fr < best_f {
            let xe = along(EXPAND, &xr);
            let fe = eval(&mut objective, &xe);
            pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < second_worst_f {
            pts[n] = (xr, fr);
        } else if fr < worst_f {
            let xc = along(CONTRACT, &xr);
            let fc = eval(&mut objective, &xc);
            if fc <= fr {
                pts[n] = (xc, fc);
            } else {
                shrink = true;
            }
        } else {
            let xc = along(CONTRACT, &worst);
            let fc = eval(&mut objective, &xc);
            if fc < worst_f {
                pts[n] = (xc, fc);
            } else {
                shrink = true;
            }
        }
        if shrink {
            let best = pts[0].0.clone();
            for (p, fp) in pts.iter_mut().skip(1) {
                for (v, b) in p.iter_mut().zip(&best) {
                    *v = b + SHRINK * (*v - b);
                }
                *fp = eval(&mut objective, p);
            }
        }
        order(&mut pts);
        iterations += 1;
        trace.push(pts[0].1);
    }
    let (x, f) = pts.swap_remove(0);
    Ok(OptResult {
        x,
        f,
        iterations,
        converged,
        gradient_norm: None,
        trace,
    })
}
