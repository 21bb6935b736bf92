use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::data::ValidationIssue;

pub type Result<T, E = SieveError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SieveError {
    #[error("empty sequence set: at least one per-sequence mark is required")]
    EmptySequenceSet,
    #[error("dataset failed validation with {} issue(s):\n{}", .0.len(), format_issues(.0))]
    Validation(Vec<ValidationIssue>),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("cell {cell} has {usable} usable observation(s); at least 2 are required")]
    InsufficientCell { cell: String, usable: usize },
    #[error("no sequenced endpoints available")]
    NoEndpointData,
    #[error("no prior available for cell {0} and no pooled fallback")]
    MissingPrior(String),
    #[error("conditioning variable {0} is not discrete")]
    NonDiscreteConditioning(String),
    #[error("failure type {0} has zero total weight")]
    NoEventsForType(usize),
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("variance of the contrast is not positive ({0})")]
    DegenerateVariance(f64),
    #[error("arm {0} has no sequenced endpoints")]
    MissingArmData(u8),
    #[error("truncation interval [{lo}, {hi}) carries no probability mass")]
    ImpossibleTruncation { lo: f64, hi: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Non-fatal conditions surfaced alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    BoundaryFit { cell: String },
    ConvergenceWarning { context: String, iterations: usize, grad_norm: f64 },
    FallbackPrior { cell: String, usable: usize },
    SeparationWarning { failure_type: usize },
    LowEventMass { failure_type: usize, mass: f64 },
    PseudoInverseWarning,
    BootstrapUnstable { failed: usize, total: usize },
    DegenerateTable,
    DegenerateMissingness,
    MissingnessSeparation,
    FlooredProbabilities { count: usize },
    DroppedUnsequenced { count: usize },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::BoundaryFit { cell } => {
                write!(f, "beta prior for cell {cell} hit the parameter bounds")
            }
            Warning::ConvergenceWarning {
                context,
                iterations,
                grad_norm,
            } => write!(
                f,
                "{context}: no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})"
            ),
            Warning::FallbackPrior { cell, usable } => write!(
                f,
                "cell {cell} has {usable} usable endpoint(s); using the pooled prior"
            ),
            Warning::SeparationWarning { failure_type } => write!(
                f,
                "failure type {failure_type}: monotone likelihood, coefficients diverge"
            ),
            Warning::LowEventMass { failure_type, mass } => write!(
                f,
                "failure type {failure_type}: effective event mass {mass:.2} is below p+1"
            ),
            Warning::PseudoInverseWarning => {
                write!(f, "covariance matrix is singular; used a pseudo-inverse")
            }
            Warning::BootstrapUnstable { failed, total } => {
                write!(f, "{failed} of {total} bootstrap replicates failed")
            }
            Warning::DegenerateTable => write!(f, "2x2 table has a zero margin"),
            Warning::DegenerateMissingness => {
                write!(f, "sequencing indicator is constant among endpoints")
            }
            Warning::MissingnessSeparation => {
                write!(f, "missingness model is separated; probabilities floored")
            }
            Warning::FlooredProbabilities { count } => {
                write!(f, "{count} sequencing probabilities floored at epsilon")
            }
            Warning::DroppedUnsequenced { count } => write!(
                f,
                "{count} unsequenced endpoint(s) contribute to risk sets only"
            ),
        }
    }
}
