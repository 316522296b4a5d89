//! Experiment harness: configuration, data generation, per-arm runs and
//! reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use pipeline::{Arm, Pipeline};
