//! Multi-stage observational records and their CSV form.
//!
//! CSV layout: `id,s1_<name>,...,a1,s2_<name>,...,a2,...,aK,y`. Floats are
//! written in shortest round-trip decimal form, lines end in `\n`, and lines
//! starting with `#` are comments.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::regime::{History, HistoryRecord};
use crate::scalar::Scalar;

/// Ordered finite set of integer action codes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct TreatmentSpace {
    levels: Vec<i64>,
}

impl TreatmentSpace {
    pub fn new(levels: Vec<i64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::TreatmentSpace(format!(
                "need at least 2 levels, got {levels:?}"
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::TreatmentSpace(format!(
                "levels must be unique and ascending, got {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    pub fn binary() -> Self {
        Self { levels: vec![0, 1] }
    }

    pub fn levels(&self) -> &[i64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, action: i64) -> bool {
        self.levels.binary_search(&action).is_ok()
    }

    pub fn is_binary(&self) -> bool {
        self.levels == [0, 1]
    }

    /// Smallest code; the tie-break winner and the dummy-coding reference.
    pub fn reference(&self) -> i64 {
        self.levels[0]
    }

    pub fn index_of(&self, action: i64) -> Option<usize> {
        self.levels.binary_search(&action).ok()
    }
}

impl TryFrom<Vec<i64>> for TreatmentSpace {
    type Error = Error;

    fn try_from(levels: Vec<i64>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<TreatmentSpace> for Vec<i64> {
    fn from(s: TreatmentSpace) -> Self {
        s.levels
    }
}

impl fmt::Display for TreatmentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        write!(f, "{{{}}}", codes.join(","))
    }
}

pub(crate) fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Covariates and decision recorded at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageObservation<T> {
    names: Arc<[String]>,
    values: Vec<T>,
    pub action: i64,
}

impl<T: Scalar> StageObservation<T> {
    pub fn new(names: Arc<[String]>, values: Vec<T>, action: i64) -> Self {
        Self {
            names,
            values,
            action,
        }
    }

    pub fn names(&self) -> &Arc<[String]> {
        &self.names
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<T> {
        self.names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.values.get(i).copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub id: String,
    pub stages: Vec<StageObservation<T>>,
    pub outcome: T,
}

impl<T: Scalar> Trajectory<T> {
    /// History available when deciding at `stage` (covariates `1..=stage`,
    /// actions `1..stage`).
    pub fn history(&self, stage: usize) -> TrajectoryHistory<'_, T> {
        TrajectoryHistory {
            trajectory: self,
            stage,
            actions_through: stage.saturating_sub(1),
        }
    }

    /// Entire record including the final action.
    pub fn complete_history(&self) -> TrajectoryHistory<'_, T> {
        TrajectoryHistory {
            trajectory: self,
            stage: self.stages.len(),
            actions_through: self.stages.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryHistory<'a, T> {
    trajectory: &'a Trajectory<T>,
    stage: usize,
    actions_through: usize,
}

impl<T: Scalar> History<T> for TrajectoryHistory<'_, T> {
    fn stage(&self) -> usize {
        self.stage
    }

    fn covariate(&self, stage: usize, name: &str) -> Option<T> {
        if stage == 0 || stage > self.stage {
            return None;
        }
        self.trajectory.stages.get(stage - 1)?.get(name)
    }

    fn action(&self, stage: usize) -> Option<i64> {
        if stage == 0 || stage > self.actions_through {
            return None;
        }
        self.trajectory.stages.get(stage - 1).map(|s| s.action)
    }
}

/// Covariate names per stage, in column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    stages: Vec<Arc<[String]>>,
}

impl Schema {
    pub fn new(stages: Vec<Vec<String>>) -> Result<Self> {
        for (k, names) in stages.iter().enumerate() {
            for (i, n) in names.iter().enumerate() {
                if !valid_name(n) {
                    return Err(Error::Header(format!(
                        "invalid covariate name {n:?} at stage {}",
                        k + 1
                    )));
                }
                if names[..i].contains(n) {
                    return Err(Error::Header(format!(
                        "duplicate covariate {n:?} at stage {}",
                        k + 1
                    )));
                }
            }
        }
        Ok(Self {
            stages: stages.into_iter().map(Arc::from).collect(),
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Names at 1-based `stage`.
    pub fn names(&self, stage: usize) -> &Arc<[String]> {
        &self.stages[stage - 1]
    }

    pub fn contains(&self, stage: usize, name: &str) -> bool {
        stage >= 1 && stage <= self.stages.len() && self.stages[stage - 1].iter().any(|n| n == name)
    }

    pub fn to_vecs(&self) -> Vec<Vec<String>> {
        self.stages.iter().map(|s| s.to_vec()).collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["id".to_string()];
        for (k, names) in self.stages.iter().enumerate() {
            cols.extend(names.iter().map(|n| format!("s{}_{}", k + 1, n)));
            cols.push(format!("a{}", k + 1));
        }
        cols.push("y".into());
        cols
    }
}

/// One problem with a dataset; `ids` names the trajectories involved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub ids: Vec<String>,
    pub stage: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.ids.join(", "))?;
        if let Some(k) = self.stage {
            write!(f, " stage {k}")?;
        }
        write!(f, " {}: {}", self.field, self.message)
    }
}

/// Validated, immutable collection of `n` trajectories over `K` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset<T> {
    trajectories: Vec<Trajectory<T>>,
    spaces: Vec<TreatmentSpace>,
    schema: Schema,
}

impl<T: Scalar> TrajectoryDataset<T> {
    pub fn new(trajectories: Vec<Trajectory<T>>, spaces: Vec<TreatmentSpace>, schema: Schema) -> Result<Self> {
        let ds = Self::from_parts_unchecked(trajectories, spaces, schema);
        let violations = ds.validate();
        if violations.is_empty() {
            Ok(ds)
        } else {
            Err(invalid(&violations))
        }
    }

    /// Assembles a dataset without checking invariants; see [`validate`](Self::validate).
    pub fn from_parts_unchecked(trajectories: Vec<Trajectory<T>>, spaces: Vec<TreatmentSpace>, schema: Schema) -> Self {
        Self {
            trajectories,
            spaces,
            schema,
        }
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn stage_count(&self) -> usize {
        self.schema.stage_count()
    }

    pub fn trajectories(&self) -> &[Trajectory<T>] {
        &self.trajectories
    }

    pub fn spaces(&self) -> &[TreatmentSpace] {
        &self.spaces
    }

    /// Treatment space at 1-based `stage`.
    pub fn space(&self, stage: usize) -> &TreatmentSpace {
        &self.spaces[stage - 1]
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn outcomes(&self) -> Vec<T> {
        self.trajectories.iter().map(|t| t.outcome).collect()
    }

    pub fn actions(&self, stage: usize) -> Vec<i64> {
        self.trajectories.iter().map(|t| t.stages[stage - 1].action).collect()
    }

    pub fn histories(&self, stage: usize) -> Vec<TrajectoryHistory<'_, T>> {
        self.trajectories.iter().map(|t| t.history(stage)).collect()
    }

    /// Short hex digest of the covariate schema and treatment spaces.
    pub fn fingerprint(&self) -> String {
        schema_fingerprint(&self.schema, &self.spaces)
    }

    /// Copy with outcomes replaced by `f(y)`.
    pub fn map_outcomes(&self, f: impl Fn(T) -> T) -> Self {
        let mut ds = self.clone();
        for t in &mut ds.trajectories {
            t.outcome = f(t.outcome);
        }
        ds
    }

    /// Rows in the given order (indices may repeat). The result shares
    /// the schema and is not revalidated.
    pub fn select(&self, order: &[usize]) -> Self {
        Self {
            trajectories: order.iter().map(|&i| self.trajectories[i].clone()).collect(),
            spaces: self.spaces.clone(),
            schema: self.schema.clone(),
        }
    }

    /// Row indices sorted by trajectory id.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.sort_by(|&a, &b| self.trajectories[a].id.cmp(&self.trajectories[b].id));
        idx
    }

    /// Every invariant violation; empty iff the dataset is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

fn invalid(violations: &[Violation]) -> Error {
    let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    let more = violations.len().saturating_sub(5);
    let mut msg = shown.join("; ");
    if more > 0 {
        msg.push_str(&format!("; and {more} more"));
    }
    Error::InvalidDataset(msg)
}

pub fn schema_fingerprint(schema: &Schema, spaces: &[TreatmentSpace]) -> String {
    let mut h = Sha256::new();
    for (k, names) in schema.stages.iter().enumerate() {
        h.update(format!("s{}:{};", k + 1, names.join(",")));
        if let Some(sp) = spaces.get(k) {
            h.update(format!("a{}:{};", k + 1, sp));
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn id_ok(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('#') && !id.contains([',', '"', '\n', '\r'])
}

pub fn validate<T: Scalar>(ds: &TrajectoryDataset<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let k_total = ds.schema.stage_count();
    let v = |ids: Vec<String>, stage: Option<usize>, field: &str, message: String| Violation {
        ids,
        stage,
        field: field.to_string(),
        message,
    };
    if ds.trajectories.is_empty() {
        out.push(v(vec![], None, "trajectories", "dataset has no trajectories".into()));
    }
    if k_total == 0 {
        out.push(v(vec![], None, "schema", "at least one stage is required".into()));
    }
    if ds.spaces.len() != k_total {
        out.push(v(
            vec![],
            None,
            "stage_spaces",
            format!("{} treatment spaces for {} stages", ds.spaces.len(), k_total),
        ));
    }

    let mut seen = std::collections::HashSet::new();
    for t in &ds.trajectories {
        if !id_ok(&t.id) {
            out.push(v(
                vec![t.id.clone()],
                None,
                "id",
                "ids must be non-empty, not start with '#', and contain no comma, quote or newline".into(),
            ));
        }
        if !seen.insert(t.id.as_str()) {
            out.push(v(vec![t.id.clone()], None, "id", "duplicate trajectory id".into()));
        }
    }

    // reference row per stage: first trajectory matching the declared schema
    for k in 1..=k_total {
        let expected = ds.schema.names(k);
        let reference = ds
            .trajectories
            .iter()
            .find(|t| t.stages.get(k - 1).is_some_and(|s| s.names[..] == expected[..]))
            .or(ds.trajectories.first())
            .map(|t| t.id.clone());
        for t in &ds.trajectories {
            let Some(obs) = t.stages.get(k - 1) else { continue };
            if obs.names[..] != expected[..] {
                let mut ids: Vec<String> = reference.iter().cloned().collect();
                if ids.first() != Some(&t.id) {
                    ids.push(t.id.clone());
                }
                out.push(v(
                    ids,
                    Some(k),
                    "covariates",
                    format!("covariate names {:?} differ from schema {:?}", &obs.names[..], &expected[..]),
                ));
            }
        }
    }

    for t in &ds.trajectories {
        if t.stages.len() != k_total {
            out.push(v(
                vec![t.id.clone()],
                None,
                "stages",
                format!("{} stages, dataset has {}", t.stages.len(), k_total),
            ));
        }
        for (k0, obs) in t.stages.iter().enumerate() {
            let k = k0 + 1;
            if obs.values.len() != obs.names.len() {
                out.push(v(
                    vec![t.id.clone()],
                    Some(k),
                    "covariates",
                    format!("{} values for {} names", obs.values.len(), obs.names.len()),
                ));
            }
            for (name, val) in obs.names.iter().zip(&obs.values) {
                if !val.is_finite() {
                    out.push(v(
                        vec![t.id.clone()],
                        Some(k),
                        &format!("s{k}_{name}"),
                        format!("non-finite value {val}"),
                    ));
                }
            }
            if let Some(space) = ds.spaces.get(k0) {
                if !space.contains(obs.action) {
                    out.push(v(
                        vec![t.id.clone()],
                        Some(k),
                        &format!("a{k}"),
                        format!("action {} outside treatment space {}", obs.action, space),
                    ));
                }
            }
        }
        if !t.outcome.is_finite() {
            out.push(v(vec![t.id.clone()], None, "y", format!("non-finite outcome {}", t.outcome)));
        }
    }
    out
}

/// Layout recovered from a CSV header.
#[derive(Debug, Clone)]
struct Layout {
    schema: Schema,
}

fn parse_header(header: &csv::StringRecord) -> Result<Layout> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"id") {
        return Err(Error::Header("first column must be `id`".into()));
    }
    if cols.last() != Some(&"y") || cols.len() < 3 {
        return Err(Error::Header("last column must be `y`".into()));
    }
    let mut stages: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for col in &cols[1..cols.len() - 1] {
        let stage = stages.len() + 1;
        if let Some(rest) = col.strip_prefix('a') {
            match rest.parse::<usize>() {
                Ok(k) if k == stage && rest == k.to_string() => {
                    stages.push(std::mem::take(&mut current));
                    continue;
                }
                Ok(k) => {
                    return Err(Error::Header(format!(
                        "column `{col}`: expected action a{stage}, found a{k}"
                    )))
                }
                Err(_) => {}
            }
        }
        let parsed = col
            .strip_prefix('s')
            .and_then(|r| r.split_once('_'))
            .and_then(|(k, name)| k.parse::<usize>().ok().map(|k| (k, name)));
        match parsed {
            Some((k, name)) if k == stage && valid_name(name) => current.push(name.to_string()),
            Some((k, _)) if k != stage => {
                return Err(Error::Header(format!(
                    "column `{col}` out of order: expected stage {stage} covariates or a{stage}"
                )))
            }
            _ => return Err(Error::Header(format!("unrecognised column `{col}`"))),
        }
    }
    if !current.is_empty() {
        return Err(Error::Header(format!(
            "covariates of stage {} not followed by a{}",
            stages.len() + 1,
            stages.len() + 1
        )));
    }
    Ok(Layout {
        schema: Schema::new(stages)?,
    })
}

/// Number of stages declared by a CSV header (count of `a<k>` columns).
pub fn infer_stage_count(path: &Path) -> Result<usize> {
    let mut rdr = reader_for(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = rdr.headers().map_err(csv_error)?.clone();
    Ok(parse_header(&header)?.schema.stage_count())
}

fn reader_for<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(r)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("inconsistent column count: expected {expected_len}, found {len}")
        }
        _ => e.to_string(),
    };
    Error::Csv { line, message }
}

/// Loads a `K`-stage dataset where every stage has the binary space `{0,1}`.
pub fn load_csv<T: Scalar>(path: &Path, stages: usize) -> Result<TrajectoryDataset<T>> {
    load_csv_with_spaces(path, &vec![TreatmentSpace::binary(); stages])
}

pub fn load_csv_with_spaces<T: Scalar>(path: &Path, spaces: &[TreatmentSpace]) -> Result<TrajectoryDataset<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, spaces)
}

pub fn read_csv<T: Scalar, R: Read>(source: R, spaces: &[TreatmentSpace]) -> Result<TrajectoryDataset<T>> {
    let mut rdr = reader_for(source);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let layout = parse_header(&header)?;
    let k_total = layout.schema.stage_count();
    if k_total != spaces.len() {
        return Err(Error::Header(format!(
            "header declares {k_total} stages, expected {}",
            spaces.len()
        )));
    }

    let mut trajectories = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell_err = |col: usize, what: &str| Error::Csv {
            line,
            message: format!("column `{}`: {what}", &header[col]),
        };
        let mut col = 0;
        let id = rec[col].to_string();
        if id.is_empty() {
            return Err(cell_err(col, "missing value"));
        }
        col += 1;
        let mut stages_obs = Vec::with_capacity(k_total);
        for k in 1..=k_total {
            let names = layout.schema.names(k).clone();
            let mut values = Vec::with_capacity(names.len());
            for _ in 0..names.len() {
                values.push(parse_real::<T>(&rec[col]).map_err(|w| cell_err(col, &w))?);
                col += 1;
            }
            let cell = &rec[col];
            if cell.is_empty() {
                return Err(cell_err(col, "missing value"));
            }
            let action: i64 = cell
                .parse()
                .map_err(|_| cell_err(col, &format!("non-integer action `{cell}`")))?;
            if !spaces[k - 1].contains(action) {
                return Err(cell_err(
                    col,
                    &format!("action outside treatment space: {action} not in {}", spaces[k - 1]),
                ));
            }
            col += 1;
            stages_obs.push(StageObservation::new(names, values, action));
        }
        let outcome = parse_real::<T>(&rec[col]).map_err(|w| cell_err(col, &w))?;
        trajectories.push(Trajectory {
            id,
            stages: stages_obs,
            outcome,
        });
    }
    TrajectoryDataset::new(trajectories, spaces.to_vec(), layout.schema)
}

fn parse_real<T: Scalar>(cell: &str) -> std::result::Result<T, String> {
    if cell.is_empty() {
        return Err("missing value".into());
    }
    let v: T = cell.parse().map_err(|_| format!("non-numeric value `{cell}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value `{cell}`"));
    }
    Ok(v)
}

pub fn save_csv<T: Scalar>(ds: &TrajectoryDataset<T>, path: &Path) -> Result<()> {
    save_csv_with_comment(ds, path, None)
}

/// Writes the dataset, optionally preceded by one `#` comment line.
pub fn save_csv_with_comment<T: Scalar>(ds: &TrajectoryDataset<T>, path: &Path, comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(ds, &mut w, comment).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv<T: Scalar, W: Write>(ds: &TrajectoryDataset<T>, w: &mut W, comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{}", ds.schema.header().join(","))?;
    let mut line = String::new();
    for t in &ds.trajectories {
        line.clear();
        line.push_str(&t.id);
        for obs in &t.stages {
            for v in &obs.values {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push(',');
            line.push_str(&obs.action.to_string());
        }
        line.push(',');
        line.push_str(&t.outcome.to_string());
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn to_csv_string<T: Scalar>(ds: &TrajectoryDataset<T>) -> String {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf, None).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Reads stage-`k` probe histories: `id`, then the dataset columns up to and
/// including the stage-`k` covariates (no `a<k>`, no `y`).
pub fn read_probes<T: Scalar, R: Read>(source: R) -> Result<Vec<HistoryRecord<T>>> {
    let mut rdr = reader_for(source);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let mut cols: Vec<String> = header.iter().map(String::from).collect();
    if cols.last().map(String::as_str) == Some("y") {
        return Err(Error::Header("probe files carry no outcome column".into()));
    }
    // reuse the dataset layout rules by closing the last stage with a dummy action
    let stage = cols.iter().filter(|c| c.starts_with('a')).count() + 1;
    cols.push(format!("a{stage}"));
    cols.push("y".into());
    let layout = parse_header(&csv::StringRecord::from(cols))?;
    let schema = layout.schema;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell_err = |col: usize, what: &str| Error::Csv {
            line,
            message: format!("column `{}`: {what}", &header[col]),
        };
        if rec[0].is_empty() {
            return Err(cell_err(0, "missing value"));
        }
        let mut h = HistoryRecord::new(rec[0].to_string());
        let mut col = 1;
        for k in 1..=stage {
            let names = schema.names(k).clone();
            let mut values = Vec::with_capacity(names.len());
            for _ in 0..names.len() {
                values.push(parse_real::<T>(&rec[col]).map_err(|w| cell_err(col, &w))?);
                col += 1;
            }
            h.push_stage(names, values);
            if k < stage {
                let cell = &rec[col];
                let a: i64 = cell
                    .parse()
                    .map_err(|_| cell_err(col, &format!("non-integer action `{cell}`")))?;
                h.push_action(a);
                col += 1;
            }
        }
        out.push(h);
    }
    Ok(out)
}

pub fn load_probes<T: Scalar>(path: &Path) -> Result<Vec<HistoryRecord<T>>> {
    read_probes(File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Stage-`stage` histories of a dataset as owned probe records.
pub fn probes_from<T: Scalar>(ds: &TrajectoryDataset<T>, stage: usize) -> Vec<HistoryRecord<T>> {
    ds.trajectories()
        .iter()
        .map(|t| {
            let mut h = HistoryRecord::new(t.id.clone());
            for (j, obs) in t.stages.iter().take(stage).enumerate() {
                h.push_stage(obs.names().clone(), obs.values().to_vec());
                if j + 1 < stage {
                    h.push_action(obs.action);
                }
            }
            h
        })
        .collect()
}
