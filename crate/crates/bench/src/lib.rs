//! Experiment harness for the `twofold` toolkit: baselines against the
//! iterative and unrolled restorers under cross-validation, with plot-ready
//! CSV reports.

// NaN-rejecting guards are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod report;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult, Method};
