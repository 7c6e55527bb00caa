//! Robust online batch selection with class-priority reweighting.
//!
//! A target model trains on a stream of candidate batches; each step keeps
//! only the `k` points a selection rule prefers. The `reducr` rule scores
//! points by their class-weighted excess loss over frozen per-class expert
//! models and moves the class weights multiplicatively towards classes with
//! high holdout loss.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod class_weights;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod learner;
pub mod numerics;
pub mod reporting;
pub mod selection;
pub mod simulator;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use selection::Rule;
pub use simulator::{run_experiment, sweep, CheckpointPolicy, RunResult};
