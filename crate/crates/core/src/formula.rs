//! Linear-in-parameters model formulas over stage histories.
//!
//! ```text
//! formula := term ("+" term)*
//! term    := factor ("*" factor)*
//! factor  := "1" | "s" k "." name | "a" k
//! ```
//!
//! `s<k>.<name>` references a covariate observed at stage `k` and `a<k>` a
//! past decision. At stage `k` a formula may use covariates of stages `1..=k`
//! and decisions of stages `1..k`. Terms are products of factors; the empty
//! product is the intercept.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numsolve::Matrix;
use crate::regime::History;
use crate::scalar::Scalar;
use crate::trajectories::{valid_name, Schema};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Factor {
    Covariate { stage: usize, name: String },
    Action { stage: usize },
}

impl Factor {
    pub fn stage(&self) -> usize {
        match self {
            Factor::Covariate { stage, .. } | Factor::Action { stage } => *stage,
        }
    }

    fn sort_key(&self) -> (usize, u8, &str) {
        match self {
            Factor::Covariate { stage, name } => (*stage, 0, name.as_str()),
            Factor::Action { stage } => (*stage, 1, ""),
        }
    }

    pub fn evaluate<T: Scalar, H: History<T> + ?Sized>(&self, h: &H) -> Result<T> {
        match self {
            Factor::Covariate { stage, name } => h
                .covariate(*stage, name)
                .ok_or_else(|| Error::Model(format!("covariate s{stage}.{name} not found in history"))),
            Factor::Action { stage } => h
                .action(*stage)
                .map(|a| T::lit(a as f64))
                .ok_or_else(|| Error::Model(format!("action a{stage} not found in history"))),
        }
    }
}

impl Ord for Factor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for Factor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Covariate { stage, name } => write!(f, "s{stage}.{name}"),
            Factor::Action { stage } => write!(f, "a{stage}"),
        }
    }
}

/// Product of history factors; no factors means the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    pub fn intercept() -> Self {
        Self::default()
    }

    pub fn from_factors(mut factors: Vec<Factor>) -> Self {
        factors.sort();
        Self { factors }
    }

    pub fn covariate(stage: usize, name: &str) -> Self {
        Self::from_factors(vec![Factor::Covariate {
            stage,
            name: name.to_string(),
        }])
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.factors.len()
    }

    pub fn references_action(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::Action { .. }))
    }

    pub fn evaluate<T: Scalar, H: History<T> + ?Sized>(&self, h: &H) -> Result<T> {
        self.factors
            .iter()
            .try_fold(T::one(), |acc, f| Ok(acc * f.evaluate(h)?))
    }

    /// Checks every covariate factor against the schema.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        for f in &self.factors {
            if let Factor::Covariate { stage, name } = f {
                if !schema.contains(*stage, name) {
                    return Err(Error::Formula {
                        position: 0,
                        message: format!("unknown covariate name `s{stage}.{name}` in term `{self}`"),
                    });
                }
            } else if let Factor::Action { stage } = f {
                if *stage > schema.stage_count() {
                    return Err(Error::Formula {
                        position: 0,
                        message: format!("unknown action `a{stage}` in term `{self}`"),
                    });
                }
            }
        }
        Ok(())
    }
}

impl Ord for Term {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.factors.cmp(&other.factors))
    }
}

impl PartialOrd for Term {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("1");
        }
        for (i, fac) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            write!(f, "{fac}")?;
        }
        Ok(())
    }
}

impl FromStr for Term {
    type Err = Error;

    /// Parses a single term with no stage restriction.
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = parse_formula(s, usize::MAX)?;
        if terms.len() != 1 {
            return Err(Error::Formula {
                position: 0,
                message: format!("expected a single term, found {}", terms.len()),
            });
        }
        Ok(terms.remove(0))
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
    stage: usize,
}

impl Parser<'_> {
    fn err<T>(&self, position: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Formula {
            position,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.text[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn digits(&mut self) -> Option<usize> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.text[start..self.pos].parse().ok()
    }

    fn name(&mut self) -> &str {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    /// `None` stands for the literal `1`.
    fn factor(&mut self) -> Result<Option<Factor>> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some('1') => {
                self.pos += 1;
                if self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                    return self.err(start, "expected `1`, `s<k>.<name>` or `a<k>`");
                }
                Ok(None)
            }
            Some('s') => {
                self.pos += 1;
                let Some(k) = self.digits() else {
                    return self.err(self.pos, "expected stage number after `s`");
                };
                if self.peek() != Some('.') {
                    return self.err(self.pos, "expected `.` after stage number");
                }
                self.pos += 1;
                let name_pos = self.pos;
                let name = self.name().to_string();
                if !valid_name(&name) {
                    return self.err(name_pos, "expected covariate name");
                }
                if k == 0 {
                    return self.err(start, "stages are numbered from 1");
                }
                if k > self.stage {
                    return self.err(
                        start,
                        format!("future-stage reference `s{k}.{name}` at stage {}", self.stage),
                    );
                }
                Ok(Some(Factor::Covariate { stage: k, name }))
            }
            Some('a') => {
                self.pos += 1;
                let Some(k) = self.digits() else {
                    return self.err(self.pos, "expected stage number after `a`");
                };
                if self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                    return self.err(self.pos, "unexpected character after action reference");
                }
                if k == 0 {
                    return self.err(start, "stages are numbered from 1");
                }
                if k >= self.stage {
                    return self.err(
                        start,
                        format!(
                            "future-stage reference `a{k}` at stage {} (only earlier decisions are history)",
                            self.stage
                        ),
                    );
                }
                Ok(Some(Factor::Action { stage: k }))
            }
            Some(c) => self.err(start, format!("unexpected character `{c}`")),
            None => self.err(start, "unexpected end of formula"),
        }
    }

    fn term(&mut self) -> Result<Term> {
        let mut factors = Vec::new();
        loop {
            if let Some(f) = self.factor()? {
                factors.push(f);
            }
            self.skip_ws();
            if self.peek() == Some('*') {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(Term::from_factors(factors))
    }
}

/// Parses `text` as a formula at decision stage `stage`, returning the
/// canonical (sorted, duplicate-free) term list.
pub fn parse_formula(text: &str, stage: usize) -> Result<Vec<Term>> {
    let mut p = Parser { text, pos: 0, stage };
    let mut terms: Vec<(Term, usize)> = Vec::new();
    loop {
        p.skip_ws();
        let start = p.pos;
        let term = p.term()?;
        if let Some((_, first)) = terms.iter().find(|(t, _)| *t == term) {
            return p.err(
                start,
                format!("duplicate term `{term}` (first at position {first})"),
            );
        }
        terms.push((term, start));
        p.skip_ws();
        match p.peek() {
            Some('+') => p.pos += 1,
            None => break,
            Some(c) => return p.err(p.pos, format!("expected `+` or `*`, found `{c}`")),
        }
    }
    let mut out: Vec<Term> = terms.into_iter().map(|(t, _)| t).collect();
    out.sort();
    Ok(out)
}

/// Prints terms so that `parse_formula(format_formula(ts)) == ts`.
pub fn format_formula(terms: &[Term]) -> String {
    terms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" + ")
}

/// `n x p` matrix with entry `(i, j)` the value of term `j` on history `i`.
pub fn build_design<T: Scalar, H: History<T>>(histories: &[H], terms: &[Term]) -> Result<Matrix<T>> {
    let mut m = Matrix::zeros(histories.len(), terms.len());
    for (i, h) in histories.iter().enumerate() {
        let row = m.row_mut(i);
        for (j, t) in terms.iter().enumerate() {
            row[j] = t.evaluate(h)?;
        }
    }
    Ok(m)
}

/// Values of `terms` on one history.
pub fn design_row<T: Scalar, H: History<T> + ?Sized>(h: &H, terms: &[Term]) -> Result<Vec<T>> {
    terms.iter().map(|t| t.evaluate(h)).collect()
}

/// Posited stage-`k` models: baseline, contrast (multiplied by the decision
/// code) and propensity linear predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageModelSpec {
    pub stage: usize,
    pub baseline: Vec<Term>,
    pub contrast: Vec<Term>,
    pub propensity: Vec<Term>,
}

impl StageModelSpec {
    pub fn parse(stage: usize, baseline: &str, contrast: &str, propensity: &str) -> Result<Self> {
        let part = |what: &str, text: &str| {
            parse_formula(text, stage).map_err(|e| match e {
                Error::Formula { position, message } => Error::Formula {
                    position,
                    message: format!("stage {stage} {what}: {message}"),
                },
                e => e,
            })
        };
        Ok(Self {
            stage,
            baseline: part("baseline", baseline)?,
            contrast: part("contrast", contrast)?,
            propensity: part("propensity", propensity)?,
        })
    }

    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        for t in self.baseline.iter().chain(&self.contrast).chain(&self.propensity) {
            t.check_schema(schema)?;
        }
        Ok(())
    }
}

/// Per-stage formulas as stored in a model file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFormulas {
    pub baseline: String,
    pub contrast: String,
    pub propensity: String,
    /// Action codes; defaults to `{0, 1}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<i64>>,
}

/// JSON model file: `{"stages": [{"baseline": ..., "contrast": ..., "propensity": ...}, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFile {
    pub stages: Vec<StageFormulas>,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn specs(&self) -> Result<Vec<StageModelSpec>> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| StageModelSpec::parse(i + 1, &s.baseline, &s.contrast, &s.propensity))
            .collect()
    }

    pub fn spaces(&self) -> Result<Vec<crate::TreatmentSpace>> {
        self.stages
            .iter()
            .map(|s| match &s.levels {
                Some(l) => crate::TreatmentSpace::new(l.clone()),
                None => Ok(crate::TreatmentSpace::binary()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Term {
        s.parse().unwrap()
    }

    #[test]
    fn intercept_and_covariate() {
        assert_eq!(parse_formula("1 + s1.x", 1).unwrap(), vec![Term::intercept(), t("s1.x")]);
    }

    #[test]
    fn squared_factor_allowed() {
        let terms = parse_formula("s1.x*s1.x", 1).unwrap();
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0].degree(), 2);
        assert_eq!(terms[0].to_string(), "s1.x*s1.x");
    }

    #[test]
    fn future_stage_rejected() {
        let err = parse_formula("s2.x", 1).unwrap_err();
        assert!(err.to_string().contains("future-stage reference"), "{err}");
        assert!(parse_formula("a1", 1).unwrap_err().to_string().contains("future-stage"));
        assert!(parse_formula("a1 + s2.x", 2).is_ok());
    }

    #[test]
    fn duplicate_terms_rejected_after_canonicalisation() {
        let err = parse_formula("s1.x*s1.y + s1.y * s1.x", 1).unwrap_err();
        assert!(err.to_string().contains("duplicate term"), "{err}");
        assert!(parse_formula("1 + 1", 1).is_err());
    }

    #[test]
    fn extra_intercept_factors_collapse() {
        assert_eq!(parse_formula("1*s1.x*1", 1).unwrap(), vec![t("s1.x")]);
        assert_eq!(parse_formula("1*1", 1).unwrap(), vec![Term::intercept()]);
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_formula("1 + s1x", 1) {
            Err(Error::Formula { position, .. }) => assert_eq!(position, 6),
            other => panic!("{other:?}"),
        }
        match parse_formula("1 + ", 1) {
            Err(Error::Formula { position, .. }) => assert_eq!(position, 4),
            other => panic!("{other:?}"),
        }
        assert!(parse_formula("", 1).is_err());
        assert!(parse_formula("12", 1).is_err());
        assert!(parse_formula("s1.x - 1", 1).is_err());
    }

    #[test]
    fn canonical_order_and_printing() {
        let terms = parse_formula(" a1*s2.w + s1.x*a1 + s1.x + 1 + s2.w + a1", 2).unwrap();
        assert_eq!(format_formula(&terms), "1 + s1.x + a1 + s2.w + s1.x*a1 + a1*s2.w");
    }

    #[test]
    fn unknown_covariate_against_schema() {
        let schema = Schema::new(vec![vec!["x".into()]]).unwrap();
        let spec = StageModelSpec::parse(1, "1 + s1.x", "1", "s1.q").unwrap();
        let err = spec.check_schema(&schema).unwrap_err();
        assert!(err.to_string().contains("unknown covariate name"), "{err}");
    }

    #[test]
    fn model_file_parses() {
        let m = ModelFile::from_json(
            r#"{"stages":[{"baseline":"1 + s1.x","contrast":"1 + s1.x","propensity":"1","levels":[0,1,2]}]}"#,
        )
        .unwrap();
        let specs = m.specs().unwrap();
        assert_eq!(specs[0].contrast.len(), 2);
        assert_eq!(m.spaces().unwrap()[0].levels(), &[0, 1, 2]);
    }
}
