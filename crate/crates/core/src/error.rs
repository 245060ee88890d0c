//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("density {rho} outside valid interval [{min}, {max}]")]
    Domain { rho: f64, min: f64, max: f64 },

    #[error("pressure {p} outside attainable range [{min}, {max}]")]
    Range { p: f64, min: f64, max: f64 },

    #[error("phase {phase}: potential value {value} at y={y} leaves the image [{min}, {max}]")]
    Feasibility {
        phase: usize,
        y: f64,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("interface height {h} leaves the capillary ({min}, {max})")]
    InterfaceOutside { h: f64, min: f64, max: f64 },

    #[error("{what}: no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),

    #[error("degenerate equilibrium: {0}")]
    DegenerateEquilibrium(String),

    #[error("isolation failure: {0}")]
    IsolationFailure(String),

    #[error("degenerate threshold: {0}")]
    DegenerateThreshold(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("eigensolver failure: {0}")]
    EigSolveFailure(String),

    #[error("eigenvalue branch tracking ambiguous: {0}")]
    BranchTracking(String),

    #[error("initial state violates compatibility conditions: {}", violated.join(", "))]
    Compatibility { violated: Vec<String> },

    #[error("time step failed: {0}")]
    StepFailure(String),

    #[error("rate fit failed: {0}")]
    Fit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "DomainError",
            Error::Range { .. } => "RangeError",
            Error::Feasibility { .. } | Error::InterfaceOutside { .. } => "FeasibilityError",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::InternalInvariantViolation(_) => "InternalInvariantViolation",
            Error::DegenerateEquilibrium(_) => "DegenerateEquilibrium",
            Error::IsolationFailure(_) => "IsolationFailure",
            Error::DegenerateThreshold(_) => "DegenerateThreshold",
            Error::Solve(_) => "SolveError",
            Error::EigSolveFailure(_) => "EigSolveFailure",
            Error::BranchTracking(_) => "BranchTrackingError",
            Error::Compatibility { .. } => "CompatibilityError",
            Error::StepFailure(_) => "StepFailure",
            Error::Fit(_) => "FitError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
