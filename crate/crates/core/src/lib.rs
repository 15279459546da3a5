//! Adaptive selection of treatment burden for a patient whose engagement is
//! latent and whose only observable is daily adherence.
//!
//! * [`model`]: engagement dynamics, adherence probabilities, rewards.
//! * [`vi`]: value iteration on a discretized state space and policy structure.
//! * [`estimator`]: profile-likelihood fits over a finite parameter grid.
//! * [`controllers`]: MLE-β, Thompson sampling and benchmark policies.
//! * [`simulator`]: synthetic patient trajectories.
//! * [`experiment`]: replicated runs, metrics and CSV/JSON output.
//!
//! Model, VI and estimator code is generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which the controllers and harness use.

pub mod controllers;
pub mod estimator;
pub mod experiment;
pub mod model;
pub mod scalar;
pub mod seeding;
pub mod simulator;
pub mod vi;

pub use model::{Action, Adherence};
pub use scalar::Scalar;

pub type Params = model::PatientParams<f64>;
pub type State = model::EngagementState<f64>;
pub type Grid = vi::GridSpec<f64>;
pub type ValueFunction = vi::ValueFunction<f64>;
pub type PolicyTable = vi::PolicyTable<f64>;
pub type ViSolution = vi::ViSolution<f64>;
pub type Tuple = estimator::ModelTuple<f64>;
pub type SubproblemGrid = estimator::SubproblemGrid<f64>;
pub type SubproblemSolution = estimator::SubproblemSolution<f64>;
pub type FitReport = estimator::FitReport<f64>;
