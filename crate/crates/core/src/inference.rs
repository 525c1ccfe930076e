//! Bootstrap reliability summaries and marginal covariate screening.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alearn::fit_a_regime;
use crate::error::{Error, Result};
use crate::formula::{build_design, StageModelSpec, Term};
use crate::numsolve::{solve_least_squares, Matrix, PivotedQr};
use crate::qlearn::{fit_q_regime, fit_q_regime_bare};
use crate::regime::{FittedRegime, HistoryRecord, Regime};
use crate::rng::unit_stream;
use crate::scalar::Scalar;
use crate::trajectories::TrajectoryDataset;

/// Smallest number of bootstrap resamples accepted.
pub const MIN_REPLICATES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "qlearn")]
    QLearn,
    #[serde(rename = "alearn")]
    ALearn,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::QLearn => "qlearn",
            Method::ALearn => "alearn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qlearn" => Ok(Method::QLearn),
            "alearn" => Ok(Method::ALearn),
            _ => Err(Error::Invalid(format!("unknown method `{s}` (expected qlearn or alearn)"))),
        }
    }
}

/// Fits a regime with the chosen estimator.
pub fn fit_regime<T: Scalar>(ds: &TrajectoryDataset<T>, method: Method, specs: &[StageModelSpec]) -> Result<FittedRegime<T>> {
    Ok(match method {
        Method::QLearn => FittedRegime::QLearn(fit_q_regime(ds, specs)?),
        Method::ALearn => FittedRegime::ALearn(fit_a_regime(ds, specs)?),
    })
}

fn fit_for_resample<T: Scalar>(ds: &TrajectoryDataset<T>, method: Method, specs: &[StageModelSpec]) -> Result<FittedRegime<T>> {
    Ok(match method {
        Method::QLearn => {
            let q = fit_q_regime_bare(ds, specs)?;
            // a minimal-norm solution on an aliased resample is not an estimate
            if let Some(f) = q.stages.iter().find(|f| f.diagnostics.rank_deficient) {
                return Err(Error::Model(format!("stage {} design is rank deficient", f.stage)));
            }
            FittedRegime::QLearn(q)
        }
        Method::ALearn => FittedRegime::ALearn(fit_a_regime(ds, specs)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct CoefficientInterval<T> {
    pub name: String,
    pub estimate: T,
    pub lower: T,
    pub upper: T,
    /// Point estimate outside its own percentile interval.
    pub inverted: bool,
}

impl<T: Scalar> CoefficientInterval<T> {
    pub fn width(&self) -> T {
        self.upper - self.lower
    }

    pub fn covers(&self, value: T) -> bool {
        self.lower <= value && value <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStability {
    pub id: String,
    pub stage: usize,
    pub action: i64,
    /// Fraction of successful resamples recommending `action`.
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct EstimateReport<T> {
    pub method: Method,
    pub n: usize,
    pub replicates: usize,
    pub failed: usize,
    pub alpha: f64,
    pub seed: u64,
    pub coefficients: Vec<CoefficientInterval<T>>,
    pub inversions: usize,
    pub recommendation_stability: Vec<ProbeStability>,
}

impl<T: Scalar> EstimateReport<T> {
    pub fn interval(&self, name: &str) -> Option<&CoefficientInterval<T>> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_table(&self) -> String {
        let level = 100.0 * (1.0 - self.alpha);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "method {}  n {}  resamples {} ({} failed)  seed {}",
            self.method,
            self.n,
            self.replicates - self.failed,
            self.failed,
            self.seed
        );
        let width = self.coefficients.iter().map(|c| c.name.len()).max().unwrap_or(4).max(11);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>12}  {:>12}", "coefficient", "estimate", format!("{level}% lo"), format!("{level}% hi"));
        for c in &self.coefficients {
            let flag = if c.inverted { "  (outside interval)" } else { "" };
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.6}  {:>12.6}  {:>12.6}{flag}",
                c.name,
                c.estimate.to_f64_lossy(),
                c.lower.to_f64_lossy(),
                c.upper.to_f64_lossy()
            );
        }
        if !self.recommendation_stability.is_empty() {
            let _ = writeln!(s, "\n{:<12}  {:>5}  {:>6}  {:>9}", "probe", "stage", "action", "agreement");
            for p in &self.recommendation_stability {
                let _ = writeln!(s, "{:<12}  {:>5}  {:>6}  {:>9.3}", p.id, p.stage, p.action, p.agreement);
            }
        }
        s
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct Replicate {
    coefficients: Vec<f64>,
    actions: Vec<i64>,
}

/// Nonparametric bootstrap over trajectories.
///
/// Resample `b` draws `n` row indices with replacement from the dataset in
/// id order using generator `unit_stream(seed, b)`, so the report does not
/// depend on the input row order. Percentile intervals have miscoverage
/// `alpha`. Resamples that fail to fit are excluded and counted; more than
/// 10% failures is an error.
pub fn bootstrap<T: Scalar>(
    ds: &TrajectoryDataset<T>,
    method: Method,
    specs: &[StageModelSpec],
    replicates: usize,
    alpha: f64,
    probes: &[HistoryRecord<T>],
    seed: u64,
) -> Result<EstimateReport<T>> {
    if replicates < MIN_REPLICATES {
        return Err(Error::Invalid(format!("bootstrap needs at least {MIN_REPLICATES} resamples, got {replicates}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let base = ds.select(&ds.canonical_order());
    let point = fit_regime(&base, method, specs)?;
    let point_coefs = point.coefficients();
    let point_actions = probes
        .iter()
        .map(|p| point.decide(p))
        .collect::<Result<Vec<_>>>()?;

    let n = base.n();
    let runs: Vec<Option<Replicate>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = unit_stream(seed, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = base.select(&idx);
            let fit = fit_for_resample(&sample, method, specs).ok()?;
            let actions = probes.iter().map(|p| fit.decide(p)).collect::<Result<Vec<_>>>().ok()?;
            Some(Replicate {
                coefficients: fit.coefficients().into_iter().map(|(_, v)| v.to_f64_lossy()).collect(),
                actions,
            })
        })
        .collect();
    let ok: Vec<&Replicate> = runs.iter().flatten().collect();
    let failed = replicates - ok.len();
    if failed * 10 > replicates {
        return Err(Error::BootstrapUnstable { failed, total: replicates });
    }

    let mut coefficients = Vec::with_capacity(point_coefs.len());
    for (j, (name, est)) in point_coefs.into_iter().enumerate() {
        let mut vals: Vec<f64> = ok.iter().map(|r| r.coefficients[j]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        let lower = T::lit(quantile_sorted(&vals, alpha / 2.0));
        let upper = T::lit(quantile_sorted(&vals, 1.0 - alpha / 2.0));
        coefficients.push(CoefficientInterval {
            name,
            estimate: est,
            lower,
            upper,
            inverted: est < lower || est > upper,
        });
    }
    let inversions = coefficients.iter().filter(|c| c.inverted).count();
    let recommendation_stability = probes
        .iter()
        .zip(&point_actions)
        .enumerate()
        .map(|(i, (p, &a))| ProbeStability {
            id: p.id.clone(),
            stage: p.covariates.len(),
            action: a,
            agreement: ok.iter().filter(|r| r.actions[i] == a).count() as f64 / ok.len() as f64,
        })
        .collect();
    Ok(EstimateReport {
        method,
        n,
        replicates,
        failed,
        alpha,
        seed,
        coefficients,
        inversions,
        recommendation_stability,
    })
}

pub const SCREENING_LIMITATION: &str = "scores are marginal t-statistics from one least-squares fit; \
they are not adjusted for selection, so downstream intervals on selected terms are optimistic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenEntry {
    pub term: Term,
    pub coefficient: f64,
    pub std_error: f64,
    /// `|coefficient| / std_error`.
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub n: usize,
    pub threshold: f64,
    /// Sorted by descending score.
    pub entries: Vec<ScreenEntry>,
    pub note: String,
}

impl ScreeningReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.term.to_string().len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}  {:>12}  {:>12}  {:>9}  selected\n", "term", "coefficient", "std_error", "score");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.6}  {:>12.6}  {:>9.3}  {}",
                e.term.to_string(),
                e.coefficient,
                e.std_error,
                e.score,
                if e.selected { "yes" } else { "no" }
            );
        }
        let _ = writeln!(s, "note: {}", self.note);
        s
    }
}

/// Regresses `Y` on an intercept plus `candidates` evaluated on the complete
/// history and ranks candidates by `|t|`.
pub fn screen_covariates<T: Scalar>(ds: &TrajectoryDataset<T>, candidates: &[Term], threshold: f64) -> Result<ScreeningReport> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidate terms to screen".into()));
    }
    for t in candidates {
        t.check_schema(ds.schema())?;
    }
    let mut terms = vec![Term::intercept()];
    terms.extend(candidates.iter().cloned());
    let histories: Vec<_> = ds.trajectories().iter().map(|t| t.complete_history()).collect();
    let x: Matrix<T> = build_design(&histories, &terms)?;
    let qr = PivotedQr::factor(&x)?;
    if qr.rank() < terms.len() {
        let groups = qr
            .aliased_groups()
            .into_iter()
            .map(|g| g.into_iter().map(|j| terms[j].to_string()).collect())
            .collect();
        return Err(Error::Aliased(groups));
    }
    let fit = solve_least_squares(&x, &ds.outcomes())?;
    let diag = qr.unscaled_covariance_diagonal().ok_or_else(|| Error::Aliased(Vec::new()))?;
    let s2 = fit.residual_variance.to_f64_lossy();
    let mut entries: Vec<ScreenEntry> = candidates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let beta = fit.coefficients[i + 1].to_f64_lossy();
            let se = (s2 * diag[i + 1].to_f64_lossy()).sqrt();
            let score = if se > 0.0 {
                beta.abs() / se
            } else if beta == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            ScreenEntry {
                term: t.clone(),
                coefficient: beta,
                std_error: se,
                score,
                selected: score >= threshold,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(ScreeningReport {
        n: ds.n(),
        threshold,
        entries,
        note: SCREENING_LIMITATION.to_string(),
    })
}
