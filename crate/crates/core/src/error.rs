use thiserror::Error;

use crate::numsolve::SolveDiagnostics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the numerical solvers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("singular system (zero pivot in column {column})")]
    Singular { column: usize },
    #[error("ill-conditioned system (condition estimate {condition:e} exceeds {limit:e})")]
    IllConditioned { condition: f64, limit: f64 },
    #[error(
        "logistic fit did not converge after {} iterations (gradient norm {:e})",
        .0.iterations,
        .0.gradient_norm
    )]
    NonConvergence(SolveDiagnostics),
    #[error("logistic response must be 0/1, found {0}")]
    NonBinaryResponse(f64),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid treatment space: {0}")]
    TreatmentSpace(String),
    #[error("formula error at position {position}: {message}")]
    Formula { position: usize, message: String },
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("degenerate propensity at stage {stage}: every observed action is {action}")]
    DegeneratePropensity { stage: usize, action: i64 },
    #[error("A-learning requires binary {{0,1}} decisions; stage {stage} has levels {levels:?}")]
    NonBinarySpace { stage: usize, levels: Vec<i64> },
    #[error("incomplete history: {0}")]
    IncompleteHistory(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("regime undefined on sampled history: {0}")]
    RegimeUndefined(String),
    #[error("state space of {cells} cells exceeds cap {cap}")]
    StateSpaceTooLarge { cells: u128, cap: u128 },
    #[error("{failed} of {total} bootstrap resamples failed to fit (limit 10%)")]
    BootstrapUnstable { failed: usize, total: usize },
    #[error("aliased candidate terms: {}", format_groups(.0))]
    Aliased(Vec<Vec<String>>),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

fn format_groups(groups: &[Vec<String>]) -> String {
    groups
        .iter()
        .map(|g| format!("[{}]", g.join(", ")))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Error {
    pub(crate) fn at_stage(self, stage: usize) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
