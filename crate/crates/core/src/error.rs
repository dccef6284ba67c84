//! Error types shared by all solver modules.

use thiserror::Error;

/// Errors produced by generators, solvers and strategy evaluation.
#[derive(Debug, Error)]
pub enum SolverError {
    /// `-L` is singular or its inverse has a negative entry, so the chain is
    /// not transient and resolvents do not exist.
    #[error("generator is not transient: {0}")]
    NonTransient(String),

    /// Negative off-diagonal entry or positive row sum in a rate matrix.
    #[error("invalid rate matrix: {0}")]
    InvalidRates(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Time step too coarse for the chain or driver at hand.
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    /// The implicit-step scalar equation could not be bracketed; this signals
    /// a driver that is not nonincreasing in its own component.
    #[error("scalar root bracketing failed: {0}")]
    RootBracketFailure(String),

    /// A monotone iterate decreased beyond numerical slack.
    #[error("monotone iteration decreased: {0}")]
    MonotonicityBroken(String),

    #[error("iteration cap reached without convergence: {0}")]
    NoConvergence(String),

    #[error("solutions live on different grids: {0}")]
    GridMismatch(String),

    /// Terminal data does not dominate the obstacle at the final step.
    #[error("terminal data does not dominate the barrier: {0}")]
    TerminalDominationFailed(String),

    /// The upper envelope fails to dominate its own barrier image.
    #[error("upper envelope fails barrier domination: {0}")]
    EnvelopeDominationFailed(String),

    #[error("operation requires a decoupled driver: {0}")]
    NonDecoupledDriver(String),

    /// The obstacle system admits a closed switching loop with nonpositive
    /// total cost.
    #[error("barrier admits a zero-cost switching loop: {0}")]
    NoLoopViolation(String),

    #[error("enumeration cap exceeded: {0}")]
    CapExceeded(String),

    /// A strategy prescribes a switch to a mode outside the adjacency set,
    /// or an instantaneous switching cycle.
    #[error("invalid strategy action: {0}")]
    InvalidAction(String),

    /// The active-set update revisited a previous mask without converging.
    #[error("active-set update cycled: {0}")]
    MaskCycle(String),

    /// Switching values are only defined for terminal rewards that do not
    /// depend on the mode.
    #[error("mode-dependent terminal rewards are not supported: {0}")]
    ModeDependentTerminal(String),

    /// Operation defined only for a restricted barrier or driver form.
    #[error("unsupported form: {0}")]
    UnsupportedForm(String),
}

pub type SolverResult<T> = Result<T, SolverError>;
