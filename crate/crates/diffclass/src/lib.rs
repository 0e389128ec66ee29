//! Conditional diffusion models repurposed as classifiers.
//!
//! Train a small conditional denoiser, classify by comparing per-condition
//! reconstruction errors over a shared set of noise levels, decide by
//! averaging or majority voting, quantify uncertainty from vote entropy, and
//! explain predictions with classifier-free-guidance counterfactuals. A
//! closed-form Gaussian oracle denoiser makes the classifier math exactly
//! verifiable against the analytic Bayes classifier.

pub mod error;
pub mod explain;
pub mod uncertainty;
pub mod classifier;
pub mod data;
pub mod denoiser;
pub mod nn;
pub mod schedule;
pub mod training;
pub mod metrics;
pub mod config;

pub use error::{Error, Result};
