//! Dense solvers behind every estimating equation: pivoted-QR least squares
//! with minimal-norm handling of rank deficiency, partially pivoted LU for
//! square systems, and ridge-stabilised IRLS for logistic likelihoods.

#![allow(clippy::needless_range_loop)]

mod logistic;
mod lu;
mod matrix;
mod qr;

use serde::{Deserialize, Serialize};

pub use logistic::{fit_logistic, LogisticFit, DEFAULT_RIDGE, SEPARATION_PROBABILITY};
pub use lu::{solve_linear_system, solve_linear_system_diagnosed, LuFactors};
pub use matrix::{dot, norm_2, norm_inf, Matrix};
pub use qr::{solve_least_squares, LeastSquaresFit, PivotedQr};

/// Convergence and conditioning summary attached to every solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub rank: usize,
    pub condition_estimate: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    #[serde(default)]
    pub rank_deficient: bool,
    #[serde(default)]
    pub separation_warning: bool,
}

impl SolveDiagnostics {
    pub(crate) fn direct(rank: usize, full: usize, condition_estimate: f64) -> Self {
        Self {
            rank,
            condition_estimate,
            iterations: 1,
            converged: true,
            gradient_norm: 0.0,
            rank_deficient: rank < full,
            separation_warning: false,
        }
    }
}

pub(crate) fn condition_limit<T: crate::Scalar>() -> f64 {
    1e12 * f64::EPSILON / T::epsilon().to_f64_lossy()
}
