//! Backward-induction Q-learning with linear stage models.
//!
//! At stage `k` the pseudo-outcome is regressed on
//! `[ b(h) | 1{a = l} c(h) for each non-reference level l ]` by ordinary
//! least squares (identity working covariance), and the rowwise maximum of
//! the fitted Q-function over the stage's action levels becomes the
//! pseudo-outcome for stage `k - 1`. Stage `K` starts from the observed `Y`.

use serde::{Deserialize, Serialize};

use crate::alearn::{fit_propensity, PropensityFit};
use crate::error::{Error, Result};
use crate::formula::{build_design, design_row, StageModelSpec, Term};
use crate::numsolve::{dot, solve_least_squares, Matrix, SolveDiagnostics};
use crate::regime::{argmax_with_ties, check_history, History, Recommendation, Regime};
use crate::scalar::Scalar;
use crate::trajectories::{TrajectoryDataset, TreatmentSpace};

/// Fitted stage-`k` Q-function `Q(h, a) = b(h)'eta_b + sum_l 1{a = l} c(h)'eta_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct QStageFit<T> {
    pub stage: usize,
    pub levels: TreatmentSpace,
    pub baseline_terms: Vec<Term>,
    pub contrast_terms: Vec<Term>,
    pub baseline: Vec<T>,
    /// One block per non-reference level, in level order.
    pub contrasts: Vec<Vec<T>>,
    pub diagnostics: SolveDiagnostics,
    /// Behaviour-policy model kept to annotate recommendations with data support.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<PropensityFit<T>>,
}

impl<T: Scalar> QStageFit<T> {
    /// Concatenated coefficient vector `(eta_b, eta_1, ..., eta_{L-1})`.
    pub fn eta(&self) -> Vec<T> {
        let mut eta = self.baseline.clone();
        for c in &self.contrasts {
            eta.extend_from_slice(c);
        }
        eta
    }

    /// Q-values at every level plus the magnitude scale used for tie detection.
    fn values_from_rows(&self, b: &[T], c: &[T]) -> (Vec<T>, T) {
        let base = dot(b, &self.baseline);
        let mut scale = base.abs();
        let mut q = vec![base];
        for block in &self.contrasts {
            let mut g = T::zero();
            for (&ci, &e) in c.iter().zip(block) {
                g = g + ci * e;
                scale = scale + (ci * e).abs();
            }
            q.push(base + g);
        }
        (q, scale)
    }

    pub fn q_values(&self, h: &dyn History<T>) -> Result<Vec<T>> {
        let b = design_row(h, &self.baseline_terms)?;
        let c = design_row(h, &self.contrast_terms)?;
        Ok(self.values_from_rows(&b, &c).0)
    }

    fn best(&self, h: &dyn History<T>) -> Result<(usize, Vec<T>)> {
        let b = design_row(h, &self.baseline_terms)?;
        let c = design_row(h, &self.contrast_terms)?;
        let (q, scale) = self.values_from_rows(&b, &c);
        Ok((argmax_with_ties(&q, scale), q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct QRegime<T> {
    pub schema_fingerprint: String,
    pub covariates: Vec<Vec<String>>,
    /// Stage fits in ascending stage order (fitted from `K` down to 1).
    pub stages: Vec<QStageFit<T>>,
}

impl<T: Scalar> QRegime<T> {
    pub fn stage(&self, k: usize) -> &QStageFit<T> {
        &self.stages[k - 1]
    }

    pub fn coefficients(&self) -> Vec<(String, T)> {
        let mut out = Vec::new();
        for s in &self.stages {
            for (t, &v) in s.baseline_terms.iter().zip(&s.baseline) {
                out.push((format!("stage{}.baseline.{t}", s.stage), v));
            }
            let multi = s.contrasts.len() > 1;
            for (l, block) in s.contrasts.iter().enumerate() {
                let label = if multi {
                    format!("contrast[{}]", s.levels.levels()[l + 1])
                } else {
                    "contrast".to_string()
                };
                for (t, &v) in s.contrast_terms.iter().zip(block) {
                    out.push((format!("stage{}.{label}.{t}", s.stage), v));
                }
            }
        }
        out
    }

    pub fn recommend(&self, h: &dyn History<T>) -> Result<Recommendation<T>> {
        let k = check_history(h, self.stages.len())?;
        let fit = self.stage(k);
        let (best, q) = fit.best(h)?;
        let runner_up = q
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &v)| v)
            .fold(T::neg_infinity(), T::max);
        let propensity = match &fit.support {
            Some(p) => Some(p.probability(h)?),
            None => None,
        };
        Ok(Recommendation {
            stage: k,
            action: fit.levels.levels()[best],
            contrast_or_qgap: q[best] - runner_up,
            propensity,
        })
    }
}

impl<T: Scalar> Regime<T> for QRegime<T> {
    fn stages(&self) -> usize {
        self.stages.len()
    }

    fn decide(&self, h: &dyn History<T>) -> Result<i64> {
        let k = check_history(h, self.stages.len())?;
        let fit = self.stage(k);
        let (best, _) = fit.best(h)?;
        Ok(fit.levels.levels()[best])
    }
}

/// Stacks `[B | 1{a = l} C ...]` for the Q regression.
fn q_design<T: Scalar>(b: &Matrix<T>, c: &Matrix<T>, actions: &[i64], space: &TreatmentSpace) -> Matrix<T> {
    let (pb, pc) = (b.cols(), c.cols());
    let blocks = space.len() - 1;
    let mut x = Matrix::zeros(b.rows(), pb + blocks * pc);
    for (i, &a) in actions.iter().enumerate() {
        let row = x.row_mut(i);
        row[..pb].copy_from_slice(b.row(i));
        if let Some(l) = space.index_of(a).filter(|&l| l > 0) {
            let off = pb + (l - 1) * pc;
            row[off..off + pc].copy_from_slice(c.row(i));
        }
    }
    x
}

fn check_spec<T: Scalar>(ds: &TrajectoryDataset<T>, k: usize, spec: &StageModelSpec) -> Result<()> {
    if spec.stage != k {
        return Err(Error::Model(format!("model for stage {} used at stage {k}", spec.stage)));
    }
    if spec.baseline.is_empty() || spec.contrast.is_empty() {
        return Err(Error::Model("baseline and contrast term lists must be non-empty".into()));
    }
    spec.check_schema(ds.schema())
}

/// Fits stage `k` against `pseudo_outcome` and returns the fit together with
/// the rowwise maximum of the fitted Q-function.
pub fn fit_q_stage<T: Scalar>(
    ds: &TrajectoryDataset<T>,
    k: usize,
    pseudo_outcome: &[T],
    spec: &StageModelSpec,
) -> Result<(QStageFit<T>, Vec<T>)> {
    check_spec(ds, k, spec)?;
    if pseudo_outcome.len() != ds.n() {
        return Err(Error::Model(format!(
            "pseudo-outcome has length {}, dataset has {} rows",
            pseudo_outcome.len(),
            ds.n()
        )));
    }
    if pseudo_outcome.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("pseudo-outcome contains non-finite values".into()));
    }
    let hist = ds.histories(k);
    let b = build_design(&hist, &spec.baseline)?;
    let c = build_design(&hist, &spec.contrast)?;
    let space = ds.space(k).clone();
    let actions = ds.actions(k);
    let x = q_design(&b, &c, &actions, &space);
    let ls = solve_least_squares(&x, pseudo_outcome)?;

    let pb = spec.baseline.len();
    let pc = spec.contrast.len();
    let eta = ls.coefficients;
    let fit = QStageFit {
        stage: k,
        levels: space,
        baseline_terms: spec.baseline.clone(),
        contrast_terms: spec.contrast.clone(),
        baseline: eta[..pb].to_vec(),
        contrasts: eta[pb..].chunks(pc).map(|c| c.to_vec()).collect(),
        diagnostics: ls.diagnostics,
        support: None,
    };
    let next = (0..ds.n())
        .map(|i| {
            let (q, _) = fit.values_from_rows(b.row(i), c.row(i));
            q.into_iter().fold(T::neg_infinity(), T::max)
        })
        .collect();
    Ok((fit, next))
}

/// Backward pass `k = K, ..., 1`; stage `K` regresses the observed outcome.
pub fn fit_q_regime<T: Scalar>(ds: &TrajectoryDataset<T>, specs: &[StageModelSpec]) -> Result<QRegime<T>> {
    let mut regime = fit_q_regime_bare(ds, specs)?;
    for fit in &mut regime.stages {
        if fit.levels.is_binary() && !specs[fit.stage - 1].propensity.is_empty() {
            fit.support = fit_propensity(ds, fit.stage, &specs[fit.stage - 1]).ok();
        }
    }
    Ok(regime)
}

/// Backward pass without the propensity annotation (used by resampling).
pub(crate) fn fit_q_regime_bare<T: Scalar>(ds: &TrajectoryDataset<T>, specs: &[StageModelSpec]) -> Result<QRegime<T>> {
    let k_total = ds.stage_count();
    if specs.len() != k_total {
        return Err(Error::Model(format!(
            "{} stage models for {} stages",
            specs.len(),
            k_total
        )));
    }
    let mut pseudo = ds.outcomes();
    let mut fits = Vec::with_capacity(k_total);
    for k in (1..=k_total).rev() {
        let (fit, next) = fit_q_stage(ds, k, &pseudo, &specs[k - 1]).map_err(|e| e.at_stage(k))?;
        fits.push(fit);
        pseudo = next;
    }
    fits.reverse();
    Ok(QRegime {
        schema_fingerprint: ds.fingerprint(),
        covariates: ds.schema().to_vecs(),
        stages: fits,
    })
}
