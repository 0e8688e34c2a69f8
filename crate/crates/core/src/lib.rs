//! Asymptotic theory of multi-stage self-distillation for linear
//! classifiers on a noisy two-cluster Gaussian mixture.
//!
//! The [`replica`] module solves the saddle-point equations stage by stage,
//! [`linear_exact`] holds closed forms for the linear family,
//! [`simulator`] trains the actual finite-size chain, and [`hyperopt`]
//! tunes the schedule against the asymptotic error.

pub mod error;
pub mod hyperopt;
pub mod linear_exact;
pub mod loss;
pub mod model;
pub mod replica;
pub mod simulator;

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use model::{
    gauss_density, gauss_tail, generalization_error, label_joint, HyperSchedule, LabelJoint, LossFamily,
    ProblemConfig, StageSolution,
};
