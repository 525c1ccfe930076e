//! Histories, decision rules, and the fitted-regime file format.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::alearn::ARegime;
use crate::error::{Error, Result};
use crate::qlearn::QRegime;
use crate::scalar::Scalar;

/// Information available when deciding at stage `k`: covariates of stages
/// `1..=k` and decisions of stages `1..k`.
pub trait History<T> {
    fn stage(&self) -> usize;
    fn covariate(&self, stage: usize, name: &str) -> Option<T>;
    fn action(&self, stage: usize) -> Option<i64>;
}

impl<T, H: History<T> + ?Sized> History<T> for &H {
    fn stage(&self) -> usize {
        (**self).stage()
    }
    fn covariate(&self, stage: usize, name: &str) -> Option<T> {
        (**self).covariate(stage, name)
    }
    fn action(&self, stage: usize) -> Option<i64> {
        (**self).action(stage)
    }
}

/// Owned history, e.g. a probe row or a partially simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord<T> {
    pub id: String,
    pub names: Vec<Arc<[String]>>,
    pub covariates: Vec<Vec<T>>,
    pub actions: Vec<i64>,
}

impl<T: Scalar> HistoryRecord<T> {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            names: Vec::new(),
            covariates: Vec::new(),
            actions: Vec::new(),
        }
    }

    /// Appends the covariates of the next stage.
    pub fn push_stage(&mut self, names: Arc<[String]>, values: Vec<T>) {
        self.names.push(names);
        self.covariates.push(values);
    }

    pub fn push_action(&mut self, action: i64) {
        self.actions.push(action);
    }
}

impl<T: Scalar> History<T> for HistoryRecord<T> {
    fn stage(&self) -> usize {
        self.covariates.len()
    }

    fn covariate(&self, stage: usize, name: &str) -> Option<T> {
        let k = stage.checked_sub(1)?;
        let names = self.names.get(k)?;
        let i = names.iter().position(|n| n == name)?;
        self.covariates.get(k)?.get(i).copied()
    }

    fn action(&self, stage: usize) -> Option<i64> {
        self.actions.get(stage.checked_sub(1)?).copied()
    }
}

/// Rejects histories missing an earlier decision or with no stage at all.
pub fn check_history<T, H: History<T> + ?Sized>(h: &H, stages: usize) -> Result<usize> {
    let k = h.stage();
    if k == 0 {
        return Err(Error::IncompleteHistory("history has no stage covariates".into()));
    }
    if k > stages {
        return Err(Error::IncompleteHistory(format!(
            "history reaches stage {k} but the regime has {stages} stages"
        )));
    }
    if let Some(j) = (1..k).find(|&j| h.action(j).is_none()) {
        return Err(Error::IncompleteHistory(format!(
            "decision a{j} missing from stage-{k} history"
        )));
    }
    Ok(k)
}

/// Relative size below which two stage values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Index of the best value, ties (within `tol * scale`) going to the
/// lowest index.
pub(crate) fn argmax_with_ties<T: Scalar>(values: &[T], scale: T) -> usize {
    let best = values.iter().copied().fold(T::neg_infinity(), T::max);
    let tol = T::tolerance(TIE_TOLERANCE) * scale;
    values
        .iter()
        .position(|&v| best - v <= tol)
        .unwrap_or(0)
}

/// Decision rule for every stage.
pub trait Regime<T: Scalar>: Sync {
    fn stages(&self) -> usize;

    /// Action at stage `history.stage()`.
    fn decide(&self, history: &dyn History<T>) -> Result<i64>;
}

/// Recommendation at a probe history with the supporting numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation<T> {
    pub stage: usize,
    pub action: i64,
    /// Contrast `psi'c(h)` (A-learning) or the Q gap to the runner-up
    /// action (Q-learning).
    pub contrast_or_qgap: T,
    /// Fitted `P(a = 1 | h)` where a propensity model is available.
    pub propensity: Option<T>,
}

/// Either fitted regime, tagged by method in its JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", bound(deserialize = "T: Scalar"))]
pub enum FittedRegime<T> {
    #[serde(rename = "qlearn")]
    QLearn(QRegime<T>),
    #[serde(rename = "alearn")]
    ALearn(ARegime<T>),
}

impl<T: Scalar> FittedRegime<T> {
    pub fn method_name(&self) -> &'static str {
        match self {
            FittedRegime::QLearn(_) => "qlearn",
            FittedRegime::ALearn(_) => "alearn",
        }
    }

    pub fn recommend(&self, history: &dyn History<T>) -> Result<Recommendation<T>> {
        match self {
            FittedRegime::QLearn(r) => r.recommend(history),
            FittedRegime::ALearn(r) => r.recommend(history),
        }
    }

    pub fn schema_fingerprint(&self) -> &str {
        match self {
            FittedRegime::QLearn(r) => &r.schema_fingerprint,
            FittedRegime::ALearn(r) => &r.schema_fingerprint,
        }
    }

    pub fn covariates(&self) -> &[Vec<String>] {
        match self {
            FittedRegime::QLearn(r) => &r.covariates,
            FittedRegime::ALearn(r) => &r.covariates,
        }
    }

    /// Flattened `(name, value)` coefficient list in a stable order.
    pub fn coefficients(&self) -> Vec<(String, T)> {
        match self {
            FittedRegime::QLearn(r) => r.coefficients(),
            FittedRegime::ALearn(r) => r.coefficients(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl<T: Scalar> Regime<T> for FittedRegime<T> {
    fn stages(&self) -> usize {
        match self {
            FittedRegime::QLearn(r) => r.stages(),
            FittedRegime::ALearn(r) => r.stages(),
        }
    }

    fn decide(&self, history: &dyn History<T>) -> Result<i64> {
        match self {
            FittedRegime::QLearn(r) => r.decide(history),
            FittedRegime::ALearn(r) => r.decide(history),
        }
    }
}

/// Recommended action at the history's current stage.
pub fn recommend_next<T: Scalar, R: Regime<T> + ?Sized>(regime: &R, history: &dyn History<T>) -> Result<i64> {
    regime.decide(history)
}

/// Same action at every stage and history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstantRegime {
    pub actions: Vec<i64>,
}

impl ConstantRegime {
    pub fn new(action: i64, stages: usize) -> Self {
        Self {
            actions: vec![action; stages],
        }
    }
}

impl<T: Scalar> Regime<T> for ConstantRegime {
    fn stages(&self) -> usize {
        self.actions.len()
    }

    fn decide(&self, history: &dyn History<T>) -> Result<i64> {
        let k = check_history(history, self.actions.len())?;
        Ok(self.actions[k - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_first_maximum() {
        assert_eq!(argmax_with_ties(&[0.1, 0.9, 0.9], 1.0), 1);
        assert_eq!(argmax_with_ties(&[0.0, 1e-17], 1.0), 0);
        assert_eq!(argmax_with_ties(&[0.0, 1e-3], 1.0), 1);
    }

    #[test]
    fn history_record_actions() {
        let names: Arc<[String]> = vec!["x".to_string()].into();
        let mut h = HistoryRecord::<f64>::new("p");
        h.push_stage(names.clone(), vec![1.0]);
        assert_eq!(check_history(&h, 2).unwrap(), 1);
        h.push_action(1);
        h.push_stage(names, vec![2.0]);
        assert_eq!(check_history(&h, 2).unwrap(), 2);
        assert_eq!(h.action(1), Some(1));
        assert_eq!(h.covariate(2, "x"), Some(2.0));
        assert_eq!(h.covariate(3, "x"), None);
    }

    #[test]
    fn missing_prior_action_is_incomplete() {
        let names: Arc<[String]> = vec!["x".to_string()].into();
        let mut h = HistoryRecord::<f64>::new("p");
        h.push_stage(names.clone(), vec![1.0]);
        h.push_stage(names, vec![2.0]);
        assert!(matches!(check_history(&h, 2), Err(Error::IncompleteHistory(_))));
    }
}
