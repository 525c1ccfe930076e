use crate::error::SolveError;
use crate::scalar::Scalar;

use super::lu::LuFactors;
use super::matrix::{dot, norm_2, Matrix};
use super::SolveDiagnostics;

pub const DEFAULT_RIDGE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;
const GRADIENT_TOLERANCE: f64 = 1e-10;
/// Fitted probabilities closer than this to 0 or 1 raise the separation warning.
pub const SEPARATION_PROBABILITY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit<T> {
    pub coefficients: Vec<T>,
    pub diagnostics: SolveDiagnostics,
}

fn sigmoid<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(eta: T) -> T {
    eta.max(T::zero()) + (-eta.abs()).exp().ln_1p()
}

struct Problem<'a, T> {
    x: &'a Matrix<T>,
    a: &'a [T],
    ridge: T,
    /// 1 for penalised columns, 0 for all-ones (intercept) columns.
    penalty: Vec<T>,
    inv_n: T,
}

impl<T: Scalar> Problem<'_, T> {
    fn objective(&self, beta: &[T]) -> T {
        let mut ll = T::zero();
        for i in 0..self.x.rows() {
            let eta = dot(self.x.row(i), beta);
            ll = ll + self.a[i] * eta - softplus(eta);
        }
        let pen = beta
            .iter()
            .zip(&self.penalty)
            .fold(T::zero(), |s, (&b, &m)| s + m * b * b);
        ll * self.inv_n - self.ridge * pen / T::lit(2.0)
    }

    /// Gradient and Hessian of the mean penalised log-likelihood (Hessian negated).
    fn derivatives(&self, beta: &[T]) -> (Vec<T>, Matrix<T>, Vec<T>) {
        let p = self.x.cols();
        let mut grad = vec![T::zero(); p];
        let mut hess = Matrix::zeros(p, p);
        let mut probs = Vec::with_capacity(self.x.rows());
        for i in 0..self.x.rows() {
            let row = self.x.row(i);
            let pi = sigmoid(dot(row, beta));
            probs.push(pi);
            let resid = self.a[i] - pi;
            let w = pi * (T::one() - pi);
            for j in 0..p {
                grad[j] = grad[j] + row[j] * resid;
                let wj = w * row[j];
                for k in j..p {
                    hess[(j, k)] = hess[(j, k)] + wj * row[k];
                }
            }
        }
        for j in 0..p {
            grad[j] = grad[j] * self.inv_n - self.ridge * self.penalty[j] * beta[j];
            for k in j..p {
                let v = hess[(j, k)] * self.inv_n;
                hess[(j, k)] = v;
                hess[(k, j)] = v;
            }
            hess[(j, j)] = hess[(j, j)] + self.ridge * self.penalty[j];
        }
        (grad, hess, probs)
    }
}

/// Ridge-stabilised logistic maximum likelihood by Newton/IRLS with step
/// halving.
///
/// The objective is the mean Bernoulli log-likelihood minus
/// `ridge / 2 * ||beta||^2`, where columns that are identically one
/// (intercepts) are left unpenalised. Convergence means the Euclidean norm
/// of the objective's gradient is at most `1e-10` within 100 Newton steps.
pub fn fit_logistic<T: Scalar>(x: &Matrix<T>, a: &[T], ridge: T) -> Result<LogisticFit<T>, SolveError> {
    let (n, p) = (x.rows(), x.cols());
    if n == 0 || p == 0 {
        return Err(SolveError::DimensionMismatch(format!("design is {n}x{p}")));
    }
    if a.len() != n {
        return Err(SolveError::DimensionMismatch(format!(
            "response has length {}, design has {n} rows",
            a.len()
        )));
    }
    if !x.is_finite() {
        return Err(SolveError::NonFinite("design matrix"));
    }
    if let Some(&bad) = a.iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(SolveError::NonBinaryResponse(bad.to_f64_lossy()));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(ridge >= T::zero()) {
        return Err(SolveError::NonFinite("ridge"));
    }
    let penalty = (0..p)
        .map(|j| {
            if (0..n).all(|i| x[(i, j)] == T::one()) {
                T::zero()
            } else {
                T::one()
            }
        })
        .collect();
    let problem = Problem {
        x,
        a,
        ridge,
        penalty,
        inv_n: T::one() / T::lit(n as f64),
    };
    let tol = T::tolerance(GRADIENT_TOLERANCE);

    let mut beta = vec![T::zero(); p];
    let mut objective = problem.objective(&beta);
    let mut iterations = 0;
    loop {
        let (grad, hess, probs) = problem.derivatives(&beta);
        let gnorm = norm_2(&grad);
        let converged = gnorm <= tol;
        if converged || iterations == MAX_ITERATIONS {
            let sep = T::lit(SEPARATION_PROBABILITY);
            let diagnostics = SolveDiagnostics {
                rank: p,
                condition_estimate: LuFactors::factor(&hess)
                    .map(|lu| lu.condition_1(&hess))
                    .unwrap_or(f64::INFINITY),
                iterations,
                converged,
                gradient_norm: gnorm.to_f64_lossy(),
                rank_deficient: false,
                separation_warning: probs.iter().any(|&q| q < sep || q > T::one() - sep),
            };
            if !converged {
                return Err(SolveError::NonConvergence(diagnostics));
            }
            return Ok(LogisticFit {
                coefficients: beta,
                diagnostics,
            });
        }

        let step = LuFactors::factor(&hess)?.solve(&grad);
        let scale = objective.abs() + T::one();
        let slack = T::epsilon() * T::lit(16.0) * scale;
        // rounding bound of the n-term sum; changes below it carry no information
        let noise = T::epsilon() * T::lit(n as f64 + 16.0) * scale;
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + t * s).collect();
            let val = problem.objective(&cand);
            let ok = val >= objective - slack
                || (val >= objective - noise && norm_2(&problem.derivatives(&cand).0) < gnorm);
            if ok {
                accepted = Some((cand, val));
                break;
            }
            t = t / T::lit(2.0);
        }
        let Some((cand, val)) = accepted else {
            // no ascent direction at working precision; report as-is
            iterations = MAX_ITERATIONS;
            continue;
        };
        beta = cand;
        objective = val;
        iterations += 1;
    }
}
