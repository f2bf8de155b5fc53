//! Seeded synthetic datasets with known ground truth, used by benchmarks,
//! acceptance checks and the CLI smoke runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{ExpressionMatrix, LoadOptions};
use crate::qdode::rk4_integrate;

/// Forty variables over twenty samples in two alternating power-law modules,
/// `1·t^0.3` and `5·t^1.1`, with multiplicative lognormal noise (σ = 0.1).
/// Returns the matrix and the true module of each variable.
pub fn two_module_matrix(seed: u64) -> (ExpressionMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let n = 20;
    // Both module curves stay within a factor of ~2 of each other on this
    // range, which keeps multiplicative noise close to homoscedastic.
    let design: Vec<f64> = (0..n).map(|i| 0.1 + 0.1 * i as f64 / (n - 1) as f64).collect();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for j in 0..40 {
        let (a, b, k) = if j % 2 == 0 { (1.0, 0.3, 0) } else { (5.0, 1.1, 1) };
        rows.push(
            design
                .iter()
                .map(|&t| a * f64::powf(t, b) * f64::exp(noise.sample(&mut rng)))
                .collect(),
        );
        truth.push(k);
    }
    let mat = ExpressionMatrix::new(
        (0..40).map(|j| format!("g{j}")).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
        rows,
        LoadOptions::default(),
    )
    .expect("generated matrix is valid");
    (mat, truth)
}

/// Fraction of labels matching `truth` under the best relabeling of `l`
/// modules.
pub fn assignment_accuracy(labels: &[usize], truth: &[usize], l: usize) -> f64 {
    fn perms(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(k - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, k - 1);
                out.push(q);
            }
        }
        out
    }
    perms(l)
        .iter()
        .map(|p| labels.iter().zip(truth).filter(|(a, b)| p[**a] == **b).count())
        .max()
        .unwrap_or(0) as f64
        / labels.len().max(1) as f64
}

/// Linear system dy/dν = A·y with known coefficients `a` (row = target),
/// sampled at `n` evenly spaced ν in [-1, 1]. A final `rest` row makes every
/// column sum `1000 + 100ν`, so the scaled index reproduces ν exactly.
/// Variables are named `x1..xd`. Cells may be negative.
pub fn linear_system_matrix(a: &[Vec<f64>], y0: &[f64], n: usize) -> Result<ExpressionMatrix> {
    let d = y0.len();
    if a.len() != d || a.iter().any(|r| r.len() != d) {
        return Err(Error::Validation(format!("coefficient matrix must be {d}×{d}")));
    }
    if n < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let traj = rk4_integrate(
        |_, y, out| {
            for (o, row) in out.iter_mut().zip(a) {
                *o = row.iter().zip(y).map(|(c, v)| c * v).sum();
            }
        },
        y0,
        &grid,
        Some(1e-4),
    )?;
    let mut rows: Vec<Vec<f64>> = (0..d).map(|k| traj.iter().map(|s| s[k]).collect()).collect();
    let rest = (0..n)
        .map(|i| 1000.0 + 100.0 * grid[i] - rows.iter().map(|r| r[i]).sum::<f64>())
        .collect();
    rows.push(rest);
    let mut ids: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    ids.push("rest".into());
    ExpressionMatrix::new(
        ids,
        (0..n).map(|i| format!("s{i}")).collect(),
        rows,
        LoadOptions { allow_negative: true },
    )
}

/// Five coupled variables: two oscillators at frequencies near 2 and 4, a
/// relaxing variable fed by the first, and cross-couplings. Row = target.
pub fn five_variable_system() -> (Vec<Vec<f64>>, Vec<f64>) {
    let a = vec![
        vec![0.2, 2.0, 0.0, 0.0, 0.0],
        vec![-2.0, 0.0, 0.6, 0.0, 0.0],
        vec![1.5, 0.0, -1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 4.0],
        vec![0.0, 0.0, 0.0, -4.0, -0.2],
    ];
    (a, vec![3.0, 1.0, 2.0, -1.0, 2.5])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::scale_index;

    #[test]
    fn linear_system_index_is_affine() {
        let (a, y0) = five_variable_system();
        let m = linear_system_matrix(&a, &y0, 21).unwrap();
        let s = scale_index(m.index()).unwrap();
        for (i, v) in s.scaled.iter().enumerate() {
            assert!((v - (-1.0 + 0.1 * i as f64)).abs() < 1e-12);
        }
        assert_eq!(m.row(0)[0], 3.0);
        assert!(linear_system_matrix(&a, &y0[..3], 21).is_err());
    }

    #[test]
    fn benchmark_is_seeded() {
        assert_eq!(two_module_matrix(3).0, two_module_matrix(3).0);
        assert_ne!(two_module_matrix(3).0, two_module_matrix(4).0);
    }

    #[test]
    fn accuracy_ignores_label_names() {
        assert_eq!(assignment_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1], 2), 1.0);
        assert_eq!(assignment_accuracy(&[0, 1, 0, 0], &[0, 0, 1, 1], 2), 0.75);
    }
}
