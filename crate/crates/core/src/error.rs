//! Error taxonomy shared by every module.
//!
//! Gate failures (hypothesis checks that refuse to certify rather than
//! signal a defect) are distinguished from hard errors so the CLI can map
//! them to its own exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("all log-weights are -inf; nothing to normalize")]
    AllNegInfinite,
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("kernel evaluates non-finite on the required difference range")]
    NonFiniteKernel,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("model is not strongly concave (kappa = {0})")]
    NotStronglyConcave(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("grid window expansion exhausted; density mass escapes every tried window")]
    GridOverflow,
    #[error("dimension {0} exceeds the brute-force cap of {1}")]
    DimensionTooLarge(usize, usize),
    #[error("symmetry gate failed: max marginal-mean spread {0:.3e} exceeds 1e-6")]
    SymmetryGateFailed(f64),
    #[error("coupling matrix is not doubly stochastic (max row-sum deviation {0:.3e})")]
    NotDoublyStochastic(f64),
    #[error("kernel is positive somewhere on the probe grid (K({0}) = {1})")]
    NotNonpositiveKernel(f64, f64),
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("sample length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("chain diverged: coordinate {coord} reached {value:.3e}, beyond 4x the window")]
    DivergentChain { coord: usize, value: f64 },
    #[error("time {0} outside [0, T)")]
    TimeOutOfRange(f64),
    #[error("drift clipping exceeded budget: {clipped} of {total} evaluations")]
    ClipBudgetExceeded { clipped: u64, total: u64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("model invariant violated: {0}")]
    InvariantViolated(String),
}

impl Error {
    /// Gates are refused hypotheses, not defects; the CLI exits 2 on them.
    pub fn is_gate(&self) -> bool {
        matches!(
            self,
            Error::SymmetryGateFailed(_)
                | Error::NotDoublyStochastic(_)
                | Error::NotNonpositiveKernel(_, _)
        )
    }

    /// Stable machine-readable code for manifests and reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::AllNegInfinite => "E_ALL_NEG_INF",
            Error::NonFiniteInput(_) => "E_NONFINITE_INPUT",
            Error::OutOfRange(_) => "E_OUT_OF_RANGE",
            Error::NonFiniteKernel => "E_NONFINITE_KERNEL",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::NotStronglyConcave(_) => "E_NOT_STRONGLY_CONCAVE",
            Error::NoConvergence { .. } => "E_NO_CONVERGENCE",
            Error::GridOverflow => "E_GRID_OVERFLOW",
            Error::DimensionTooLarge(_, _) => "E_DIMENSION_TOO_LARGE",
            Error::SymmetryGateFailed(_) => "E_GATE_SYMMETRY",
            Error::NotDoublyStochastic(_) => "E_GATE_DOUBLY_STOCHASTIC",
            Error::NotNonpositiveKernel(_, _) => "E_GATE_KERNEL_SIGN",
            Error::NotSpd => "E_NOT_SPD",
            Error::LengthMismatch(_, _) => "E_LENGTH_MISMATCH",
            Error::DivergentChain { .. } => "E_DIVERGENT_CHAIN",
            Error::TimeOutOfRange(_) => "E_TIME_RANGE",
            Error::ClipBudgetExceeded { .. } => "E_CLIP_BUDGET",
            Error::InvalidSpec(_) => "E_INVALID_SPEC",
            Error::InvariantViolated(_) => "E_INVARIANT",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
