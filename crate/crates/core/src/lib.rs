//! Coordinated sparse recovery for learning with noisy labels.
//!
//! A classifier `f` is trained jointly with per-sample noise parameters
//! `u`, `v` and a class collaboration matrix `M`, with confidence weights
//! deciding how much each sample's gradient goes to the model versus the
//! noise parameters. The crate also ships the baselines, the diagnostics used
//! to study training dynamics, a sample-selection extension and the data and
//! label-corruption tooling needed to reproduce experiments end to end.

// negated comparisons are used on purpose so that NaN takes the error path
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collab;
pub mod config;
pub mod confidence;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod noise;
pub mod noise_synth;
pub mod par;
pub mod plus;
pub mod rundir;
pub mod selection;
pub mod trainer;

pub use error::{Error, Result};
pub use trainer::{train, Method, TrainConfig, TrainOutcome};
