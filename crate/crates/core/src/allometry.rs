//! Power-law (allometric) fits `y = alpha * x^beta`, estimated by ordinary
//! least squares on `log y = log alpha + beta log x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ExpressionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
    /// Points surviving the `y > 0` filter.
    pub n_used: usize,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.alpha * x.powf(self.beta)
    }
}

/// Fits the power law in log space. Points with `y == 0` are dropped.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<PowerLawFit> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "x has {} points but y has {}",
            x.len(),
            y.len()
        )));
    }
    if let Some(bad) = x.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("x must be positive and finite, found {bad}")));
    }
    if let Some(bad) = y.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!("y must be nonnegative and finite, found {bad}")));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(_, &yi)| yi > 0.0)
        .map(|(&xi, &yi)| (xi.ln(), yi.ln()))
        .unzip();
    let n_used = lx.len();
    if n_used < 2 {
        return Err(Error::InsufficientData(format!(
            "{n_used} point(s) with y > 0; need at least 2"
        )));
    }
    let nf = n_used as f64;
    let mx = lx.iter().sum::<f64>() / nf;
    let my = ly.iter().sum::<f64>() / nf;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * nf {
        return Err(Error::InsufficientData(
            "all usable x values coincide; slope is undefined".into(),
        ));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;

    let syy: f64 = ly.iter().map(|v| (v - my).powi(2)).sum();
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (b - intercept - beta * a).powi(2))
        .sum();
    // A flat response is reproduced exactly by beta = 0.
    let r_squared = if syy <= f64::EPSILON * my.abs().max(1.0) {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    Ok(PowerLawFit {
        alpha: intercept.exp(),
        beta,
        r_squared,
        n_used,
    })
}

/// Per-variable power-law fits against the expression index. Variables that
/// cannot be fitted are returned as errors in place.
pub fn fit_matrix(matrix: &ExpressionMatrix) -> Vec<(String, Result<PowerLawFit>)> {
    let index = matrix.index();
    matrix
        .variable_ids()
        .iter()
        .zip(matrix.rows())
        .map(|(id, row)| (id.clone(), fit_power_law(index, row)))
        .collect()
}
