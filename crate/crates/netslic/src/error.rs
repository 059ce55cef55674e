//! Crate-wide error type.

use crate::model::{BranchId, BusId};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Topology problems: disconnected trees, unknown branches or buses.
    #[error("topology error: {0}")]
    Topology(String),

    /// Malformed or non-finite inputs.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Snapshot generation failed (singular network, unsolvable instant).
    #[error("generation error: {0}")]
    Generation(String),

    /// A quantity left its admissible numeric domain (near-zero denominator,
    /// vanishing correction-factor ratio, degenerate TLS pencil).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Collinear current profiles at a bus make the ratio estimate unstable.
    #[error("ill-conditioned current system at bus {bus}: {detail}")]
    IllConditioned { bus: BusId, detail: String },

    /// A Newton solve ran out of iterations. Carries the objective history so
    /// the stall can be inspected.
    #[error(
        "solver did not converge on branch {branch} after {iterations} iterations \
         (gradient norm {final_gradient_norm:.3e})"
    )]
    NonConvergence {
        branch: BranchId,
        iterations: usize,
        final_gradient_norm: f64,
        objective_history: Vec<f64>,
    },

    /// Trust region shrank below the resolution limit.
    #[error("trust radius collapsed to {radius:.3e} on branch {branch}")]
    TrustRadiusCollapse { branch: BranchId, radius: f64 },

    /// Equality constraint is rank deficient or inconsistent.
    #[error("constraint error: {0}")]
    Constraint(String),

    /// A pipeline stage was invoked before its prerequisites were computed.
    #[error("pipeline order error: {0}")]
    PipelineOrder(String),

    /// Some branches calibrated, others failed.
    #[error("calibration incomplete: {} branch(es) failed: {}",
        failures.len(),
        failures.iter().map(|(b, e)| format!("{b}: {e}")).collect::<Vec<_>>().join("; "))]
    PartialResult { failures: Vec<(BranchId, String)> },

    /// Metric undefined for the given truth (zero denominator).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Observation model does not cover the state space.
    #[error("observability error: {0}")]
    Observability(String),

    #[error("trial {trial} failed: {source}")]
    TrialFailed {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
