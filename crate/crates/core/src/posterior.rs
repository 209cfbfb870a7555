//! Predictive moments and the label metrics computed from them.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Smallest variance used inside logs.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Per-query marginal predictive moments. `var_y` adds observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub mean: Vec<f64>,
    pub var_f: Vec<f64>,
    pub var_y: Vec<f64>,
    pub gradients: Option<GradientMoments>,
}

/// Moments of the partial derivatives at each query (Q×D each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientMoments {
    pub mean: Matrix,
    pub var_f: Matrix,
    pub var_y: Matrix,
}

pub fn gaussian_log_density(y: f64, mean: f64, var: f64) -> f64 {
    let var = var.max(VARIANCE_FLOOR);
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean).powi(2) / var)
}

/// Mean negative log predictive density and RMSE of `targets`.
pub fn nll_rmse_from(mean: &[f64], var_y: &[f64], targets: &[f64]) -> (f64, f64) {
    let n = targets.len().max(1) as f64;
    let nll = -targets
        .iter()
        .zip(mean.iter().zip(var_y))
        .map(|(&t, (&m, &v))| gaussian_log_density(t, m, v))
        .sum::<f64>()
        / n;
    let mse = targets
        .iter()
        .zip(mean)
        .map(|(t, m)| (t - m).powi(2))
        .sum::<f64>()
        / n;
    (nll, mse.sqrt())
}
