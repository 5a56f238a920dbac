//! Weakly supervised precursor mining for flight time series.
//!
//! A flight is a bag of per-step instances; only the bag (flight) carries
//! an incident label. A recurrent multiple-instance learner — GRU, dense
//! tanh layer, logistic head, MIL aggregation — is trained on bag labels
//! alone and read back out at the instance level, where the per-step
//! probabilities localize precursors to the incident.
//!
//! The crate bundles:
//!
//! * [`nn`] — dense/GRU/logistic layers with exact analytic gradients
//! * [`agg`] — masked MIL aggregations (max, mean, noisy-or, smooth-max)
//! * [`model`] — the assembled model, loss and backpropagation through time
//! * [`optim`]/[`train`] — ADAM with L2, mini-batch loop, validation-based
//!   model selection
//! * [`flightgen`] — synthetic approach-and-landing generator with injected
//!   precursor mechanisms and rule-based incident labeling
//! * [`data`] — splits, normalization, dataset (de)serialization
//! * [`eval`] — ROC AUC, precursor extraction, localization metrics,
//!   explanation reports
//! * [`checkpoint`] — versioned binary model checkpoints
//! * [`cli`] — the `dtmil` command-line pipeline (`gen`, `train`, `eval`,
//!   `explain`)
//!
//! See the crate examples for one runnable program per capability.

pub mod agg;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod flightgen;
pub mod model;
pub mod nn;
pub mod optim;
mod seeding;
pub mod train;

pub use error::{Error, Result};
