//! Linear IV estimation with covariate-built instruments.
//!
//! The crate simulates the data-generating processes used to study
//! misspecification bias of product instruments, estimates them by 2SLS with
//! robust errors, calibrates semi-synthetic treatment effects, and runs
//! weak-causality diagnostics on discrete models.

// Index loops mirror the matrix algebra; `!(a > b)` comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod calibration;
pub mod data_model;
pub mod dgp;
pub mod estimator;
pub mod instruments;
pub mod montecarlo;
pub mod numerics;
pub mod weak_causality;

pub use data_model::{ColumnRole, Dataset};
pub use dgp::{Dgp, DgpSpec, SigmaSpec};
pub use estimator::{tsls, IvEstimate};
pub use instruments::{InstrumentSpec, TransformId};
pub use montecarlo::{ExperimentConfig, SimulationReport};
pub use numerics::Matrix;
