//! Estimation of individualised multi-stage decision rules from
//! observational trajectories.
//!
//! Two estimators share one backward-induction skeleton:
//!
//! * [`qlearn`] fits a linear Q-function per stage and propagates the
//!   rowwise maximum as the next pseudo-outcome;
//! * [`alearn`] fits only the stage contrast via stacked estimating
//!   equations weighted by the fitted propensity, which is consistent when
//!   either the baseline or the propensity model is right.
//!
//! [`scenario`] supplies generative models with known optimal regimes for
//! validation, and [`inference`] adds bootstrap reliability summaries and
//! covariate screening. Everything numeric is generic over [`Scalar`]; the
//! aliases below fix the common `f64` instantiations.

pub mod alearn;
pub mod error;
pub mod formula;
pub mod inference;
pub mod numsolve;
pub mod qlearn;
pub mod regime;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod trajectories;

pub use error::{Error, Result, SolveError};
pub use scalar::Scalar;

pub use alearn::{ARegime, AStageFit, PropensityFit};
pub use formula::{StageModelSpec, Term};
pub use inference::{EstimateReport, Method, ScreeningReport};
pub use numsolve::{Matrix, SolveDiagnostics};
pub use qlearn::{QRegime, QStageFit};
pub use regime::{FittedRegime, History, HistoryRecord, Recommendation, Regime};
pub use scenario::{Scenario, ScenarioSpec};
pub use trajectories::{StageObservation, Trajectory, TrajectoryDataset, TreatmentSpace};

pub type Dataset = TrajectoryDataset<f64>;
pub type Dataset32 = TrajectoryDataset<f32>;
pub type QLearningRegime = QRegime<f64>;
pub type ALearningRegime = ARegime<f64>;
pub type Fitted = FittedRegime<f64>;
pub type Probe = HistoryRecord<f64>;
pub type Report = EstimateReport<f64>;
pub type DesignMatrix = Matrix<f64>;
