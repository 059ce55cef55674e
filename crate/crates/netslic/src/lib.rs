//! Simultaneous transmission-line parameter estimation and instrument
//! transformer calibration (SLIC) from synchrophasor data.
//!
//! The crate estimates, per monitored line, the series impedance and shunt
//! susceptance together with the four complex instrument-transformer
//! correction factors, anchored to a single revenue-quality meter pair
//! somewhere in the monitored (connected) tree. It ships:
//!
//! - a synthetic measurement generator with a composite multiplicative
//!   (ratio-error) plus additive (PMU noise) error model,
//! - the nonlinear estimation pipeline: regularized Newton for the RQM
//!   branch and equality-constrained trust-region Newton for branch pairs,
//! - cross-bus VT/CT ratio estimators (sample-mean and total least squares),
//! - a Monte-Carlo evaluation harness with ARE/AE metrics and a
//!   regularization sweep,
//! - a linear state estimation demo quantifying the downstream benefit,
//! - a CLI tying generation, calibration, evaluation, and reports together.

pub mod cli;
pub mod error;
pub mod eval;
pub mod formulation;
pub mod lse;
pub mod model;
pub mod ratios;
pub mod solver;
pub mod synthgen;

pub use error::{Error, Result};
