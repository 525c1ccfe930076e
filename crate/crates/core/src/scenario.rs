//! Synthetic generative models with known optimal regimes.
//!
//! A scenario fixes, per stage, the covariate laws (Gaussian with a mean
//! that is linear in earlier history, or a finite discrete law), the
//! behaviour policy (multinomial logit over history terms), and an outcome
//!
//! ```text
//! Y = baseline(h_K) + sum_k a_k * contrast_k(h_k) + sd_y * N(0, 1)
//! ```
//!
//! Draws are addressed through [`crate::rng`] by `(seed, trajectory,
//! stage, channel)`, so covariate and outcome noise are shared between the
//! behaviour policy and any evaluated regime (common random numbers).
//!
//! `contrast_args_exogenous` asserts that no action influences any
//! covariate entering the outcome and that contrasts contain no past
//! decisions; then `d_k(h) = argmax_a a * contrast_k(h)` is optimal at every
//! stage and [`true_regime`] returns it. Other scenarios are solved exactly
//! by [`dp_oracle`] when their covariates live on finite grids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{parse_formula, Factor, Term};
use crate::regime::{argmax_with_ties, check_history, History, HistoryRecord, Regime};
use crate::rng::{substream, Channel};
use crate::scalar::Scalar;
use crate::trajectories::{valid_name, Schema, StageObservation, Trajectory, TrajectoryDataset, TreatmentSpace};

/// Default cap on the number of `(history, action)` cells [`dp_oracle`] visits.
pub const DP_CELL_CAP: u128 = 1_000_000;

/// Linear predictor written as `{"term": coefficient}`.
pub type Predictor = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Law {
    /// `N(mean(h), sd^2)`; `mean` may reference earlier stages and decisions.
    Gaussian {
        #[serde(default)]
        mean: Predictor,
        sd: f64,
    },
    /// Independent draw from a finite support.
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub law: Law,
}

fn binary_levels() -> Vec<i64> {
    vec![0, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(default = "binary_levels")]
    pub levels: Vec<i64>,
    pub covariates: Vec<CovariateSpec>,
    /// One logit (against the reference level) per non-reference level.
    pub behavior: Vec<Predictor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub baseline: Predictor,
    /// Stage-`k` contrast, multiplied by the action code `a_k`.
    pub contrasts: Vec<Predictor>,
    pub noise_sd: f64,
}

/// Serialized scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub stages: Vec<StageSpec>,
    pub outcome: OutcomeSpec,
    pub contrast_args_exogenous: bool,
}

/// Parsed predictor `sum_j coef_j * term_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub terms: Vec<Term>,
    pub coefficients: Vec<f64>,
}

impl LinearPredictor {
    fn parse(p: &Predictor, stage: usize, what: &str) -> Result<Self> {
        let mut pairs: Vec<(Term, f64)> = Vec::with_capacity(p.len());
        for (text, &c) in p {
            if !c.is_finite() {
                return Err(Error::Scenario(format!("{what}: coefficient of `{text}` is not finite")));
            }
            let mut ts = parse_formula(text, stage).map_err(|e| Error::Scenario(format!("{what}: {e}")))?;
            if ts.len() != 1 {
                return Err(Error::Scenario(format!("{what}: `{text}` is not a single term")));
            }
            let t = ts.remove(0);
            if pairs.iter().any(|(u, _)| *u == t) {
                return Err(Error::Scenario(format!("{what}: term `{t}` listed twice")));
            }
            pairs.push((t, c));
        }
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let (terms, coefficients) = pairs.into_iter().unzip();
        Ok(Self { terms, coefficients })
    }

    /// Value and the sum of absolute contributions (a magnitude scale).
    pub fn evaluate<T: Scalar>(&self, h: &dyn History<T>) -> Result<(T, T)> {
        let mut v = T::zero();
        let mut scale = T::zero();
        for (t, &c) in self.terms.iter().zip(&self.coefficients) {
            let x = T::lit(c) * t.evaluate(h)?;
            v = v + x;
            scale = scale + x.abs();
        }
        Ok((v, scale))
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|&c| c == 0.0)
    }

    fn factors(&self) -> impl Iterator<Item = &Factor> {
        self.terms.iter().flat_map(|t| t.factors())
    }
}

#[derive(Debug, Clone)]
enum CompiledLaw {
    Gaussian { mean: LinearPredictor, sd: f64 },
    Discrete { values: Vec<f64>, cumulative: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct CompiledStage {
    space: TreatmentSpace,
    names: Arc<[String]>,
    laws: Vec<CompiledLaw>,
    behavior: Vec<LinearPredictor>,
}

/// Validated, ready-to-simulate scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    spec: ScenarioSpec,
    schema: Schema,
    stages: Vec<CompiledStage>,
    baseline: LinearPredictor,
    contrasts: Vec<LinearPredictor>,
}

const BUILTINS: &[(&str, &str)] = &[
    ("randomized_k1", include_str!("../scenarios/randomized_k1.json")),
    ("confounded_k2", include_str!("../scenarios/confounded_k2.json")),
    ("null_contrast_k2", include_str!("../scenarios/null_contrast_k2.json")),
    ("discrete_dp_k2", include_str!("../scenarios/discrete_dp_k2.json")),
];

const BUILTIN_MODELS: &[(&str, &str)] = &[
    ("randomized_k1", include_str!("../scenarios/randomized_k1.model.json")),
    ("confounded_k2", include_str!("../scenarios/confounded_k2.model.json")),
    ("null_contrast_k2", include_str!("../scenarios/confounded_k2.model.json")),
    ("discrete_dp_k2", include_str!("../scenarios/discrete_dp_k2.model.json")),
];

/// Names of the scenarios shipped with the crate.
pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _)| *n).collect()
}

/// Correctly specified model file (JSON) for a shipped scenario.
pub fn builtin_model(name: &str) -> Option<&'static str> {
    BUILTIN_MODELS.iter().find(|(n, _)| *n == name).map(|(_, m)| *m)
}

impl Scenario {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        let k_total = spec.stages.len();
        if k_total == 0 {
            return Err(Error::Scenario("scenario has no stages".into()));
        }
        let mut names_per_stage = Vec::with_capacity(k_total);
        for (i, st) in spec.stages.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for c in &st.covariates {
                if !valid_name(&c.name) {
                    return Err(Error::Scenario(format!("stage {}: invalid covariate name `{}`", i + 1, c.name)));
                }
                if !seen.insert(c.name.clone()) {
                    return Err(Error::Scenario(format!("stage {}: covariate `{}` declared twice", i + 1, c.name)));
                }
            }
            names_per_stage.push(st.covariates.iter().map(|c| c.name.clone()).collect::<Vec<_>>());
        }
        let schema = Schema::new(names_per_stage).map_err(|e| Error::Scenario(e.to_string()))?;

        let check = |p: &LinearPredictor, what: &str| -> Result<()> {
            for t in &p.terms {
                t.check_schema(&schema).map_err(|e| Error::Scenario(format!("{what}: {e}")))?;
            }
            Ok(())
        };

        let mut stages = Vec::with_capacity(k_total);
        for (i, st) in spec.stages.iter().enumerate() {
            let k = i + 1;
            let space = TreatmentSpace::new(st.levels.clone()).map_err(|e| Error::Scenario(format!("stage {k}: {e}")))?;
            let mut laws = Vec::with_capacity(st.covariates.len());
            for c in &st.covariates {
                let what = format!("stage {k} covariate {}", c.name);
                laws.push(match &c.law {
                    Law::Gaussian { mean, sd } => {
                        if !(sd.is_finite() && *sd >= 0.0) {
                            return Err(Error::Scenario(format!("{what}: sd must be finite and >= 0")));
                        }
                        let mean = LinearPredictor::parse(mean, k, &what)?;
                        if mean.factors().any(|f| f.stage() >= k) {
                            return Err(Error::Scenario(format!(
                                "{what}: mean may only reference earlier stages"
                            )));
                        }
                        check(&mean, &what)?;
                        CompiledLaw::Gaussian { mean, sd: *sd }
                    }
                    Law::Discrete { values, probs } => {
                        if values.is_empty() || values.len() != probs.len() {
                            return Err(Error::Scenario(format!("{what}: values and probs must be non-empty and equal length")));
                        }
                        if values.iter().any(|v| !v.is_finite()) || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                            return Err(Error::Scenario(format!("{what}: invalid support or probabilities")));
                        }
                        let total: f64 = probs.iter().sum();
                        if (total - 1.0).abs() > 1e-9 {
                            return Err(Error::Scenario(format!("{what}: probabilities sum to {total}")));
                        }
                        let mut acc = 0.0;
                        let cumulative = probs
                            .iter()
                            .map(|p| {
                                acc += p;
                                acc
                            })
                            .collect();
                        CompiledLaw::Discrete {
                            values: values.clone(),
                            cumulative,
                            probs: probs.clone(),
                        }
                    }
                });
            }
            if st.behavior.len() != space.len() - 1 {
                return Err(Error::Scenario(format!(
                    "stage {k}: {} behaviour predictors for {} non-reference levels",
                    st.behavior.len(),
                    space.len() - 1
                )));
            }
            let behavior = st
                .behavior
                .iter()
                .map(|p| {
                    let what = format!("stage {k} behaviour");
                    let lp = LinearPredictor::parse(p, k, &what)?;
                    check(&lp, &what)?;
                    Ok(lp)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(CompiledStage {
                space,
                names: schema.names(k).clone(),
                laws,
                behavior,
            });
        }

        let out = &spec.outcome;
        if !(out.noise_sd.is_finite() && out.noise_sd >= 0.0) {
            return Err(Error::Scenario("outcome noise_sd must be finite and >= 0".into()));
        }
        let baseline = LinearPredictor::parse(&out.baseline, k_total + 1, "outcome baseline")?;
        if baseline.terms.iter().any(|t| t.references_action()) {
            return Err(Error::Scenario(
                "outcome baseline must be decision-free; decisions enter through contrasts".into(),
            ));
        }
        check(&baseline, "outcome baseline")?;
        if out.contrasts.len() != k_total {
            return Err(Error::Scenario(format!(
                "{} contrasts for {k_total} stages",
                out.contrasts.len()
            )));
        }
        let contrasts = out
            .contrasts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let what = format!("stage {} contrast", i + 1);
                let lp = LinearPredictor::parse(p, i + 1, &what)?;
                check(&lp, &what)?;
                Ok(lp)
            })
            .collect::<Result<Vec<_>>>()?;

        let scn = Self {
            spec,
            schema,
            stages,
            baseline,
            contrasts,
        };
        if scn.spec.contrast_args_exogenous && !scn.exogenous() {
            return Err(Error::Scenario(
                "contrast_args_exogenous is set but a decision affects a covariate entering the outcome, \
                 or a contrast depends on an earlier decision"
                    .into(),
            ));
        }
        Ok(scn)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Scenario(format!("no built-in scenario `{name}`")))?;
        Self::from_json(text)
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn spaces(&self) -> Vec<TreatmentSpace> {
        self.stages.iter().map(|s| s.space.clone()).collect()
    }

    /// True stage-`k` contrast (terms and coefficients).
    pub fn contrast(&self, k: usize) -> &LinearPredictor {
        &self.contrasts[k - 1]
    }

    pub fn baseline(&self) -> &LinearPredictor {
        &self.baseline
    }

    /// Recomputes the exogeneity condition from the model structure.
    pub fn exogenous(&self) -> bool {
        // covariates whose law depends, directly or through other covariates, on a decision
        let mut dependent: BTreeSet<(usize, String)> = BTreeSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            for (name, law) in st.names.iter().zip(&st.laws) {
                if let CompiledLaw::Gaussian { mean, .. } = law {
                    let hit = mean.factors().any(|f| match f {
                        Factor::Action { .. } => true,
                        Factor::Covariate { stage, name } => dependent.contains(&(*stage, name.clone())),
                    });
                    if hit {
                        dependent.insert((i + 1, name.clone()));
                    }
                }
            }
        }
        let touches = |p: &LinearPredictor| {
            p.factors().any(|f| match f {
                Factor::Action { .. } => true,
                Factor::Covariate { stage, name } => dependent.contains(&(*stage, name.clone())),
            })
        };
        !touches(&self.baseline) && !self.contrasts.iter().any(touches)
    }

    fn draw_covariates<T: Scalar>(&self, k: usize, h: &HistoryRecord<T>, rng: &mut ChaCha12Rng) -> Result<Vec<T>> {
        let st = &self.stages[k - 1];
        st.laws
            .iter()
            .map(|law| match law {
                CompiledLaw::Gaussian { mean, sd } => {
                    let (m, _) = mean.evaluate(h as &dyn History<T>)?;
                    let z: f64 = rng.sample(StandardNormal);
                    Ok(m + T::lit(sd * z))
                }
                CompiledLaw::Discrete { values, cumulative, .. } => {
                    let u: f64 = rng.random();
                    let j = cumulative.iter().position(|&c| u < c).unwrap_or(values.len() - 1);
                    Ok(T::lit(values[j]))
                }
            })
            .collect()
    }

    fn behavior_action<T: Scalar>(&self, k: usize, h: &HistoryRecord<T>, rng: &mut ChaCha12Rng) -> Result<i64> {
        let st = &self.stages[k - 1];
        let mut logits = vec![0.0];
        for p in &st.behavior {
            logits.push(p.evaluate(h as &dyn History<T>)?.0.to_f64_lossy());
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return Ok(st.space.levels()[j]);
            }
        }
        Ok(*st.space.levels().last().expect("non-empty space"))
    }

    /// Noise-free `E[Y | complete history]`.
    pub fn mean_outcome<T: Scalar>(&self, h: &dyn History<T>) -> Result<T> {
        let mut y = self.baseline.evaluate(h)?.0;
        for (k, c) in self.contrasts.iter().enumerate() {
            let a = h
                .action(k + 1)
                .ok_or_else(|| Error::IncompleteHistory(format!("decision a{} missing", k + 1)))?;
            y = y + T::lit(a as f64) * c.evaluate(h)?.0;
        }
        Ok(y)
    }

    fn choose<T: Scalar>(
        &self,
        k: usize,
        policy: &EvalPolicy<'_, T>,
        h: &HistoryRecord<T>,
        seed: u64,
        index: u64,
    ) -> Result<i64> {
        match policy {
            EvalPolicy::Behavior => self.behavior_action(k, h, &mut substream(seed, index, k, Channel::Action)),
            EvalPolicy::Regime(r) => {
                let a = r
                    .decide(h)
                    .map_err(|e| Error::RegimeUndefined(format!("stage {k} of unit {index}: {e}")))?;
                if !self.stages[k - 1].space.contains(a) {
                    return Err(Error::RegimeUndefined(format!(
                        "stage {k} of unit {index}: action {a} outside {}",
                        self.stages[k - 1].space
                    )));
                }
                Ok(a)
            }
        }
    }

    /// Simulates trajectory `index`; its draws depend only on `(seed, index)`.
    pub fn simulate_one<T: Scalar>(&self, seed: u64, index: u64, policy: &EvalPolicy<'_, T>) -> Result<(HistoryRecord<T>, T)> {
        let mut h = HistoryRecord::new(String::new());
        for k in 1..=self.stages.len() {
            let values = self.draw_covariates(k, &h, &mut substream(seed, index, k, Channel::Covariates))?;
            h.push_stage(self.stages[k - 1].names.clone(), values);
            let a = self.choose(k, policy, &h, seed, index)?;
            h.push_action(a);
        }
        let z: f64 = substream(seed, index, 0, Channel::Outcome).sample(StandardNormal);
        let y = self.mean_outcome(&h as &dyn History<T>)? + T::lit(self.spec.outcome.noise_sd * z);
        Ok((h, y))
    }
}

/// How actions are chosen while forward simulating.
#[derive(Clone, Copy)]
pub enum EvalPolicy<'a, T> {
    Behavior,
    Regime(&'a dyn Regime<T>),
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

fn into_trajectory<T: Scalar>(scn: &Scenario, id: String, h: HistoryRecord<T>, y: T) -> Trajectory<T> {
    let stages = h
        .covariates
        .into_iter()
        .zip(h.actions)
        .enumerate()
        .map(|(i, (vals, a))| StageObservation::new(scn.stages[i].names.clone(), vals, a))
        .collect();
    Trajectory { id, stages, outcome: y }
}

/// `n` i.i.d. trajectories under the behaviour policy.
pub fn simulate<T: Scalar>(scn: &Scenario, n: usize, seed: u64) -> Result<TrajectoryDataset<T>> {
    if n == 0 {
        return Err(Error::Scenario("n must be at least 1".into()));
    }
    let width = id_width(n);
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| {
            let (h, y) = scn.simulate_one::<T>(seed, i as u64, &EvalPolicy::Behavior)?;
            Ok(into_trajectory(scn, format!("t{i:0width$}"), h, y))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(trajectories, scn.spaces(), scn.schema.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub value: f64,
    pub std_error: f64,
    pub replicates: usize,
}

/// Monte Carlo estimate of `E[Y]` when actions follow `policy`.
pub fn mc_value<T: Scalar>(scn: &Scenario, policy: EvalPolicy<'_, T>, m: usize, seed: u64) -> Result<McValue> {
    if m < 2 {
        return Err(Error::Scenario("mc_value needs at least 2 replicates".into()));
    }
    if let EvalPolicy::Regime(r) = policy {
        if r.stages() != scn.stage_count() {
            return Err(Error::RegimeUndefined(format!(
                "regime has {} stages, scenario has {}",
                r.stages(),
                scn.stage_count()
            )));
        }
    }
    let ys = (0..m)
        .into_par_iter()
        .map(|i| scn.simulate_one::<T>(seed, i as u64, &policy).map(|(_, y)| y.to_f64_lossy()))
        .collect::<Result<Vec<f64>>>()?;
    let mean = ys.iter().sum::<f64>() / m as f64;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (m - 1) as f64;
    Ok(McValue {
        value: mean,
        std_error: (var / m as f64).sqrt(),
        replicates: m,
    })
}

/// Stagewise sign rule of the true contrasts.
#[derive(Debug, Clone)]
pub struct SignRule {
    contrasts: Vec<LinearPredictor>,
    spaces: Vec<TreatmentSpace>,
}

impl<T: Scalar> Regime<T> for SignRule {
    fn stages(&self) -> usize {
        self.contrasts.len()
    }

    fn decide(&self, h: &dyn History<T>) -> Result<i64> {
        let k = check_history(h, self.contrasts.len())?;
        let (g, scale) = self.contrasts[k - 1].evaluate(h)?;
        let levels = self.spaces[k - 1].levels();
        // Y is linear in the code, so only the extreme codes can be optimal
        let lo = T::lit(levels[0] as f64);
        let hi = T::lit(levels[levels.len() - 1] as f64);
        let best = argmax_with_ties(&[lo * g, hi * g], scale * lo.abs().max(hi.abs()));
        Ok(if best == 0 { levels[0] } else { levels[levels.len() - 1] })
    }
}

/// Optimal regime of an exogenous scenario.
pub fn true_regime(scn: &Scenario) -> Result<SignRule> {
    if !scn.spec.contrast_args_exogenous {
        return Err(Error::Scenario(format!(
            "scenario `{}` is not marked contrast_args_exogenous, so the sign rule need not be optimal; use dp_oracle",
            scn.name()
        )));
    }
    Ok(SignRule {
        contrasts: scn.contrasts.clone(),
        spaces: scn.spaces(),
    })
}

fn quantize(v: f64) -> i64 {
    (v * 1e6).round() as i64
}

type CellKey = (Vec<i64>, Vec<i64>);

fn cell_key<T: Scalar>(h: &dyn History<T>, schema: &Schema, k: usize) -> Option<CellKey> {
    let mut xs = Vec::new();
    for j in 1..=k {
        for name in schema.names(j).iter() {
            xs.push(quantize(h.covariate(j, name)?.to_f64_lossy()));
        }
    }
    let acts = (1..k).map(|j| h.action(j)).collect::<Option<Vec<_>>>()?;
    Some((xs, acts))
}

/// Regime stored as a lookup table over an enumerated history grid.
/// Covariate values are matched after rounding to `1e-6`.
#[derive(Debug, Clone)]
pub struct TableRegime {
    schema: Schema,
    table: Vec<BTreeMap<CellKey, i64>>,
}

impl TableRegime {
    /// Number of stored decision points per stage.
    pub fn sizes(&self) -> Vec<usize> {
        self.table.iter().map(|t| t.len()).collect()
    }

    /// Every stored `(stage, history)` with its action.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &CellKey, i64)> {
        self.table
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.iter().map(move |(key, &a)| (i + 1, key, a)))
    }
}

impl<T: Scalar> Regime<T> for TableRegime {
    fn stages(&self) -> usize {
        self.table.len()
    }

    fn decide(&self, h: &dyn History<T>) -> Result<i64> {
        let k = check_history(h, self.table.len())?;
        cell_key(h, &self.schema, k)
            .and_then(|key| self.table[k - 1].get(&key).copied())
            .ok_or_else(|| Error::RegimeUndefined(format!("stage-{k} history not on the enumerated grid")))
    }
}

#[derive(Debug, Clone)]
pub struct DpSolution {
    pub regime: TableRegime,
    pub value: f64,
}

/// Finite support `(value, probability)` per covariate of stage `k` at `h`.
fn supports(scn: &Scenario, k: usize, h: &HistoryRecord<f64>) -> Result<Vec<Vec<(f64, f64)>>> {
    scn.stages[k - 1]
        .laws
        .iter()
        .zip(scn.stages[k - 1].names.iter())
        .map(|(law, name)| match law {
            CompiledLaw::Gaussian { mean, sd } => {
                if *sd != 0.0 {
                    return Err(Error::Scenario(format!(
                        "stage {k} covariate {name} has Gaussian noise; exact enumeration needs finite grids"
                    )));
                }
                Ok(vec![(mean.evaluate(h as &dyn History<f64>)?.0, 1.0)])
            }
            CompiledLaw::Discrete { values, probs, .. } => Ok(values.iter().copied().zip(probs.iter().copied()).collect()),
        })
        .collect()
}

fn count_cells(scn: &Scenario) -> u128 {
    let mut paths: u128 = 1;
    let mut cells: u128 = 0;
    for st in &scn.stages {
        let support: u128 = st
            .laws
            .iter()
            .map(|l| match l {
                CompiledLaw::Gaussian { .. } => 1u128,
                CompiledLaw::Discrete { values, .. } => values.len() as u128,
            })
            .fold(1u128, |a, b| a.saturating_mul(b));
        paths = paths.saturating_mul(support).saturating_mul(st.space.len() as u128);
        cells = cells.saturating_add(paths);
    }
    cells
}

/// Visits every joint covariate draw at stage `k` with its probability.
fn for_each_draw(
    per_covariate: &[Vec<(f64, f64)>],
    mut f: impl FnMut(Vec<f64>, f64) -> Result<()>,
) -> Result<()> {
    let mut idx = vec![0usize; per_covariate.len()];
    loop {
        let values = idx.iter().zip(per_covariate).map(|(&j, s)| s[j].0).collect();
        let p = idx.iter().zip(per_covariate).map(|(&j, s)| s[j].1).product();
        f(values, p)?;
        let mut pos = idx.len();
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < per_covariate[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

enum Chooser<'a, T> {
    Optimal(&'a mut Vec<BTreeMap<CellKey, i64>>),
    Follow(&'a dyn Regime<T>),
}

fn convert<T: Scalar>(h: &HistoryRecord<f64>) -> HistoryRecord<T> {
    HistoryRecord {
        id: h.id.clone(),
        names: h.names.clone(),
        covariates: h.covariates.iter().map(|v| v.iter().map(|&x| T::lit(x)).collect()).collect(),
        actions: h.actions.clone(),
    }
}

/// Expected outcome from stage `k` onward given the history before stage `k`.
fn dp_value<T: Scalar>(scn: &Scenario, k: usize, h: &HistoryRecord<f64>, chooser: &mut Chooser<'_, T>) -> Result<f64> {
    if k > scn.stages.len() {
        return scn.mean_outcome(h as &dyn History<f64>);
    }
    let per = supports(scn, k, h)?;
    let mut total = 0.0;
    for_each_draw(&per, |values, p| {
        let mut hk = h.clone();
        hk.push_stage(scn.stages[k - 1].names.clone(), values);
        let levels = scn.stages[k - 1].space.levels();
        let v = match chooser {
            Chooser::Optimal(_) => {
                let mut q = Vec::with_capacity(levels.len());
                for &a in levels {
                    let mut ha = hk.clone();
                    ha.push_action(a);
                    q.push(dp_value(scn, k + 1, &ha, chooser)?);
                }
                let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let best = argmax_with_ties(&q, scale);
                if let Chooser::Optimal(table) = chooser {
                    let key = cell_key(&hk as &dyn History<f64>, &scn.schema, k).expect("complete history");
                    table[k - 1].insert(key, levels[best]);
                }
                q[best]
            }
            Chooser::Follow(r) => {
                let a = r
                    .decide(&convert::<T>(&hk))
                    .map_err(|e| Error::RegimeUndefined(format!("stage {k}: {e}")))?;
                if !levels.contains(&a) {
                    return Err(Error::RegimeUndefined(format!("stage {k}: action {a} outside space")));
                }
                let mut ha = hk;
                ha.push_action(a);
                dp_value(scn, k + 1, &ha, chooser)?
            }
        };
        total += p * v;
        Ok(())
    })?;
    Ok(total)
}

fn check_cells(scn: &Scenario, cap: u128) -> Result<()> {
    let cells = count_cells(scn);
    if cells > cap {
        return Err(Error::StateSpaceTooLarge { cells, cap });
    }
    Ok(())
}

/// Exact optimal regime and value by backward dynamic programming over
/// every `(history, action)` cell. Ties go to the smallest code.
pub fn dp_oracle(scn: &Scenario, cap: u128) -> Result<DpSolution> {
    check_cells(scn, cap)?;
    let mut table = vec![BTreeMap::new(); scn.stages.len()];
    let value = dp_value::<f64>(scn, 1, &HistoryRecord::new(""), &mut Chooser::Optimal(&mut table))?;
    Ok(DpSolution {
        regime: TableRegime {
            schema: scn.schema.clone(),
            table,
        },
        value,
    })
}

/// Exact value of `regime` on a finite-grid scenario.
pub fn dp_evaluate<T: Scalar>(scn: &Scenario, regime: &dyn Regime<T>, cap: u128) -> Result<f64> {
    check_cells(scn, cap)?;
    dp_value(scn, 1, &HistoryRecord::new(""), &mut Chooser::Follow(regime))
}

/// One noise-free row per terminal `(history, actions)` cell, in
/// enumeration order; the outcome is `E[Y | cell]`.
pub fn enumerate_cells<T: Scalar>(scn: &Scenario, cap: u128) -> Result<TrajectoryDataset<T>> {
    check_cells(scn, cap)?;
    let mut leaves = Vec::new();
    collect_leaves(scn, 1, &HistoryRecord::new(""), &mut leaves)?;
    let width = id_width(leaves.len());
    let trajectories = leaves
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let y = scn.mean_outcome(&h as &dyn History<f64>)?;
            let h = convert::<T>(&h);
            Ok(into_trajectory(scn, format!("c{i:0width$}"), h, T::lit(y)))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(trajectories, scn.spaces(), scn.schema.clone())
}

fn collect_leaves(scn: &Scenario, k: usize, h: &HistoryRecord<f64>, out: &mut Vec<HistoryRecord<f64>>) -> Result<()> {
    if k > scn.stages.len() {
        out.push(h.clone());
        return Ok(());
    }
    let per = supports(scn, k, h)?;
    for_each_draw(&per, |values, _| {
        let mut hk = h.clone();
        hk.push_stage(scn.stages[k - 1].names.clone(), values);
        for &a in scn.stages[k - 1].space.levels() {
            let mut ha = hk.clone();
            ha.push_action(a);
            collect_leaves(scn, k + 1, &ha, out)?;
        }
        Ok(())
    })
}
