//! A-learning for binary decisions.
//!
//! With linear contrast `C(h) = psi'c(h)`, baseline `h(h) = beta'b(h)` and
//! fitted propensity `pi(h)`, stage `k` solves the square linear system
//!
//! ```text
//! sum_i c_i (a_i - pi_i) (V_i - a_i psi'c_i - beta'b_i) = 0
//! sum_i b_i              (V_i - a_i psi'c_i - beta'b_i) = 0
//! ```
//!
//! which identifies `psi` when either the baseline or the propensity model
//! is correct. The next pseudo-outcome is advantage corrected:
//! `V_i + (d(h_i) - a_i) psi'c_i` with `d(h) = 1{psi'c(h) > 0}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{build_design, design_row, StageModelSpec, Term};
use crate::numsolve::{dot, fit_logistic, norm_inf, solve_linear_system_diagnosed, Matrix, SolveDiagnostics, DEFAULT_RIDGE};
use crate::regime::{check_history, History, Recommendation, Regime, TIE_TOLERANCE};
use crate::scalar::Scalar;
use crate::trajectories::TrajectoryDataset;

pub const PROPENSITY_FLOOR: f64 = 0.01;
pub const PROPENSITY_CEILING: f64 = 0.99;

/// Clamps a fitted propensity into `[0.01, 0.99]`.
pub fn trim_propensity<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROPENSITY_FLOOR)).min(T::lit(PROPENSITY_CEILING))
}

fn sigmoid<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

/// Logistic model of `P(a_k = 1 | h_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PropensityFit<T> {
    pub terms: Vec<Term>,
    pub phi: Vec<T>,
    pub diagnostics: SolveDiagnostics,
    /// Trimmed fitted values on the training rows.
    #[serde(skip)]
    pub fitted: Vec<T>,
}

impl<T: Scalar> PropensityFit<T> {
    /// Trimmed propensity at an arbitrary history.
    pub fn probability(&self, h: &dyn History<T>) -> Result<T> {
        let x = design_row(h, &self.terms)?;
        Ok(trim_propensity(sigmoid(dot(&x, &self.phi))))
    }
}

fn require_binary<T: Scalar>(ds: &TrajectoryDataset<T>, k: usize) -> Result<()> {
    let space = ds.space(k);
    if !space.is_binary() {
        return Err(Error::NonBinarySpace {
            stage: k,
            levels: space.levels().to_vec(),
        });
    }
    Ok(())
}

/// Logistic regression of the stage-`k` decision on the propensity terms.
pub fn fit_propensity<T: Scalar>(ds: &TrajectoryDataset<T>, k: usize, spec: &StageModelSpec) -> Result<PropensityFit<T>> {
    require_binary(ds, k)?;
    if spec.propensity.is_empty() {
        return Err(Error::Model("propensity term list is empty".into()));
    }
    spec.check_schema(ds.schema())?;
    let actions = ds.actions(k);
    if let Some(&first) = actions.first() {
        if actions.iter().all(|&a| a == first) {
            return Err(Error::DegeneratePropensity { stage: k, action: first });
        }
    }
    let x = build_design(&ds.histories(k), &spec.propensity)?;
    let a: Vec<T> = actions.iter().map(|&v| T::lit(v as f64)).collect();
    let fit = fit_logistic(&x, &a, T::lit(DEFAULT_RIDGE))?;
    let fitted = (0..x.rows())
        .map(|i| trim_propensity(sigmoid(dot(x.row(i), &fit.coefficients))))
        .collect();
    Ok(PropensityFit {
        terms: spec.propensity.clone(),
        phi: fit.coefficients,
        diagnostics: fit.diagnostics,
        fitted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct AStageFit<T> {
    pub stage: usize,
    pub contrast_terms: Vec<Term>,
    pub baseline_terms: Vec<Term>,
    pub psi: Vec<T>,
    pub beta: Vec<T>,
    pub propensity: PropensityFit<T>,
    pub system_diagnostics: SolveDiagnostics,
    /// Max-norm residual of the stacked equations at the solution.
    pub equation_residual: f64,
}

impl<T: Scalar> AStageFit<T> {
    /// `(psi'c(h), tie scale)`.
    fn contrast_with_scale(&self, h: &dyn History<T>) -> Result<(T, T)> {
        let c = design_row(h, &self.contrast_terms)?;
        let b = design_row(h, &self.baseline_terms)?;
        Ok(contrast_and_scale(&c, &b, &self.psi, &self.beta))
    }

    pub fn contrast(&self, h: &dyn History<T>) -> Result<T> {
        Ok(self.contrast_with_scale(h)?.0)
    }
}

fn contrast_and_scale<T: Scalar>(c: &[T], b: &[T], psi: &[T], beta: &[T]) -> (T, T) {
    let mut g = T::zero();
    let mut scale = dot(b, beta).abs();
    for (&ci, &p) in c.iter().zip(psi) {
        g = g + ci * p;
        scale = scale + (ci * p).abs();
    }
    (g, scale)
}

/// Sign rule with numerically zero contrasts sent to action 0.
fn sign_rule<T: Scalar>(contrast: T, scale: T) -> i64 {
    if contrast > T::tolerance(TIE_TOLERANCE) * scale {
        1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ARegime<T> {
    pub schema_fingerprint: String,
    pub covariates: Vec<Vec<String>>,
    /// Stage fits in ascending stage order.
    pub stages: Vec<AStageFit<T>>,
}

impl<T: Scalar> ARegime<T> {
    pub fn stage(&self, k: usize) -> &AStageFit<T> {
        &self.stages[k - 1]
    }

    pub fn coefficients(&self) -> Vec<(String, T)> {
        let mut out = Vec::new();
        for s in &self.stages {
            let k = s.stage;
            out.extend(s.contrast_terms.iter().zip(&s.psi).map(|(t, &v)| (format!("stage{k}.psi.{t}"), v)));
            out.extend(s.baseline_terms.iter().zip(&s.beta).map(|(t, &v)| (format!("stage{k}.beta.{t}"), v)));
            out.extend(
                s.propensity
                    .terms
                    .iter()
                    .zip(&s.propensity.phi)
                    .map(|(t, &v)| (format!("stage{k}.phi.{t}"), v)),
            );
        }
        out
    }

    pub fn recommend(&self, h: &dyn History<T>) -> Result<Recommendation<T>> {
        let k = check_history(h, self.stages.len())?;
        let fit = self.stage(k);
        let (g, scale) = fit.contrast_with_scale(h)?;
        Ok(Recommendation {
            stage: k,
            action: sign_rule(g, scale),
            contrast_or_qgap: g,
            propensity: Some(fit.propensity.probability(h)?),
        })
    }
}

impl<T: Scalar> Regime<T> for ARegime<T> {
    fn stages(&self) -> usize {
        self.stages.len()
    }

    fn decide(&self, h: &dyn History<T>) -> Result<i64> {
        let k = check_history(h, self.stages.len())?;
        let (g, scale) = self.stage(k).contrast_with_scale(h)?;
        Ok(sign_rule(g, scale))
    }
}

/// Solves the stacked contrast/baseline equations at stage `k`.
pub fn fit_a_stage<T: Scalar>(
    ds: &TrajectoryDataset<T>,
    k: usize,
    pseudo_outcome: &[T],
    spec: &StageModelSpec,
    propensity: PropensityFit<T>,
) -> Result<(AStageFit<T>, Vec<T>)> {
    require_binary(ds, k)?;
    if spec.stage != k {
        return Err(Error::Model(format!("model for stage {} used at stage {k}", spec.stage)));
    }
    if spec.baseline.is_empty() || spec.contrast.is_empty() {
        return Err(Error::Model("baseline and contrast term lists must be non-empty".into()));
    }
    spec.check_schema(ds.schema())?;
    let n = ds.n();
    if pseudo_outcome.len() != n || propensity.fitted.len() != n {
        return Err(Error::Model(format!(
            "pseudo-outcome/propensity lengths {}/{} do not match {n} rows",
            pseudo_outcome.len(),
            propensity.fitted.len()
        )));
    }
    if pseudo_outcome.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("pseudo-outcome contains non-finite values".into()));
    }

    let hist = ds.histories(k);
    let c = build_design(&hist, &spec.contrast)?;
    let b = build_design(&hist, &spec.baseline)?;
    let actions: Vec<T> = ds.actions(k).iter().map(|&a| T::lit(a as f64)).collect();
    let (pc, pb) = (c.cols(), b.cols());
    let m = pc + pb;

    // unknowns ordered (psi, beta); rows summed in index order
    let mut lhs = Matrix::zeros(m, m);
    let mut rhs = vec![T::zero(); m];
    for i in 0..n {
        let (ci, bi) = (c.row(i), b.row(i));
        let ai = actions[i];
        let w = ai - propensity.fitted[i];
        let v = pseudo_outcome[i];
        for r in 0..pc {
            let wr = w * ci[r];
            for s in 0..pc {
                lhs[(r, s)] = lhs[(r, s)] + wr * ai * ci[s];
            }
            for s in 0..pb {
                lhs[(r, pc + s)] = lhs[(r, pc + s)] + wr * bi[s];
            }
            rhs[r] = rhs[r] + wr * v;
        }
        for r in 0..pb {
            let br = bi[r];
            for s in 0..pc {
                lhs[(pc + r, s)] = lhs[(pc + r, s)] + br * ai * ci[s];
            }
            for s in 0..pb {
                lhs[(pc + r, pc + s)] = lhs[(pc + r, pc + s)] + br * bi[s];
            }
            rhs[pc + r] = rhs[pc + r] + br * v;
        }
    }
    let (sol, system_diagnostics) = solve_linear_system_diagnosed(&lhs, &rhs)?;
    let psi = sol[..pc].to_vec();
    let beta = sol[pc..].to_vec();

    let residual = stacked_residual(&c, &b, &actions, &propensity.fitted, pseudo_outcome, &psi, &beta);
    let fit = AStageFit {
        stage: k,
        contrast_terms: spec.contrast.clone(),
        baseline_terms: spec.baseline.clone(),
        psi,
        beta,
        propensity,
        system_diagnostics,
        equation_residual: norm_inf(&residual).to_f64_lossy(),
    };

    let next = (0..n)
        .map(|i| {
            let (g, scale) = contrast_and_scale(c.row(i), b.row(i), &fit.psi, &fit.beta);
            let d = T::lit(sign_rule(g, scale) as f64);
            pseudo_outcome[i] + (d - actions[i]) * g
        })
        .collect();
    Ok((fit, next))
}

/// Left-hand sides of both stacked equations evaluated at `(psi, beta)`.
pub fn stacked_residual<T: Scalar>(
    c: &Matrix<T>,
    b: &Matrix<T>,
    actions: &[T],
    propensity: &[T],
    pseudo_outcome: &[T],
    psi: &[T],
    beta: &[T],
) -> Vec<T> {
    let (pc, pb) = (c.cols(), b.cols());
    let mut out = vec![T::zero(); pc + pb];
    for i in 0..c.rows() {
        let e = pseudo_outcome[i] - actions[i] * dot(c.row(i), psi) - dot(b.row(i), beta);
        let w = actions[i] - propensity[i];
        for r in 0..pc {
            out[r] = out[r] + c[(i, r)] * w * e;
        }
        for r in 0..pb {
            out[pc + r] = out[pc + r] + b[(i, r)] * e;
        }
    }
    out
}

/// Backward pass `K..1` starting from the observed outcome.
pub fn fit_a_regime<T: Scalar>(ds: &TrajectoryDataset<T>, specs: &[StageModelSpec]) -> Result<ARegime<T>> {
    let k_total = ds.stage_count();
    if specs.len() != k_total {
        return Err(Error::Model(format!(
            "{} stage models for {} stages",
            specs.len(),
            k_total
        )));
    }
    for k in 1..=k_total {
        require_binary(ds, k)?;
    }
    let mut pseudo = ds.outcomes();
    let mut fits = Vec::with_capacity(k_total);
    for k in (1..=k_total).rev() {
        let spec = &specs[k - 1];
        let step = fit_propensity(ds, k, spec).and_then(|p| fit_a_stage(ds, k, &pseudo, spec, p));
        let (fit, next) = step.map_err(|e| e.at_stage(k))?;
        fits.push(fit);
        pseudo = next;
    }
    fits.reverse();
    Ok(ARegime {
        schema_fingerprint: ds.fingerprint(),
        covariates: ds.schema().to_vecs(),
        stages: fits,
    })
}
