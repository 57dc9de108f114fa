//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network is not connected: found {components} components")]
    DisconnectedNetwork { components: usize },

    #[error("invalid branch {from}-{to}: {reason}")]
    InvalidBranch {
        from: usize,
        to: usize,
        reason: String,
    },

    #[error("matrix {name} is singular or near-singular (1-norm condition estimate {condition:.3e}){}",
            hint.as_deref().map(|h| format!("; {h}")).unwrap_or_default())]
    SingularMatrix {
        name: &'static str,
        condition: f64,
        hint: Option<String>,
    },

    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e} pu)")]
    NoConvergence { iterations: usize, mismatch: f64 },

    #[error("singular Jacobian during Newton iteration")]
    SingularJacobian,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("Euler-Maruyama step unstable: lambda*dt = {lambda_dt:.3} >= 0.1")]
    UnstableStep { lambda_dt: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("Lindeberg evaluation needs at least 2 sources, got {got}")]
    InsufficientSources { got: usize },

    #[error("source '{label}' has neither an empirical sample nor a closed-form distribution")]
    MissingDistribution { label: String },

    #[error("sample is degenerate (zero variance)")]
    DegenerateSample,

    #[error("integration step rejected at t = {t:.4} s: non-finite state")]
    StepRejected { t: f64 },

    #[error("invalid case data: {0}")]
    InvalidCase(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerical methods themselves, as opposed to
    /// bad inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix { .. }
                | Error::NoConvergence { .. }
                | Error::SingularJacobian
                | Error::UnstableStep { .. }
                | Error::StepRejected { .. }
        )
    }
}
