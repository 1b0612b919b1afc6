//! Online identification of nonlinear stochastic systems
//! `x_{t+1} = h(θ*, x_t, u_t) + w_{t+1}` with a projected Newton-type
//! recursive estimator, closed-loop simulation and regret diagnostics.

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod projection;
pub mod simulation;

pub use error::{Error, Result};
pub use estimator::{solve_step_size, EstimatorSnapshot, EstimatorState, StepDiagnostics, StepMode, Tolerances};
pub use metrics::{MetricsRow, MetricsSeries};
pub use models::{AlphaForm, Dimensions, ModelKind, ParamVector, SystemModel, ThresholdPolicy};
pub use projection::{project_weighted_ball, secular_root};
pub use simulation::{Controller, ExcitationKind, FeedbackSign, NoiseKind, NoiseSpec, TrajectorySample};
