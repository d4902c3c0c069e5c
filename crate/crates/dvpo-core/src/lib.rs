//! Distributional value modeling with risk-aware policy optimization.
//!
//! The crate trains small policies on noisy-reward MDPs with a critic that
//! predicts a quantile distribution per state through an ensemble of value
//! heads, plus scalar and robust baselines for comparison. Everything is
//! deterministic given a seed: reruns produce bitwise identical artifacts,
//! with or without the `parallel` feature.

pub mod baselines;
pub mod critic;
pub mod envs;
pub mod error;
pub mod gae;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod par;
pub mod policy;
pub mod quantile;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
