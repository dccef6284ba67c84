//! Default tolerances and iteration caps, collected in one place.
//!
//! Values are chosen so that inner tolerances sit well below the outer ones
//! they feed: scalar roots are polished to near machine precision, Picard
//! sweeps stop at `PICARD_TOL` and are then polished until the per-step
//! fixed-point residual is at solver accuracy, and all acceptance thresholds
//! sit one to three orders of magnitude above that.

/// Truncation tolerance for the uniformization series of `exp(dt L)`.
pub const UNIFORMIZATION_TOL: f64 = 1e-12;

/// Absolute/relative target for the implicit-step scalar root residual.
pub const ROOT_TOL: f64 = 1e-14;

/// Bisection cap for one scalar root solve.
pub const BISECT_CAP: usize = 200;

/// Newton polish cap for one scalar root solve.
pub const NEWTON_CAP: usize = 20;

/// Sup-norm increment at which a monotone Picard iteration is declared
/// converged.
pub const PICARD_TOL: f64 = 1e-10;

/// Hard cap on Picard sweeps (system iterations).
pub const PICARD_CAP: usize = 10_000;

/// Extra polishing sweeps after `PICARD_TOL` is reached; polishing stops as
/// soon as the increment stops decreasing, so the cost is a handful of sweeps.
pub const POLISH_CAP: usize = 60;

/// Slack (relative to solution scale) below which a negative Picard increment
/// counts as rounding rather than a monotonicity violation.
pub const MONOTONE_SLACK: f64 = 1e-10;

/// Maximum admissible conditional-mean residual of martingale increments.
pub const MARTINGALE_TOL: f64 = 1e-12;

/// Contact tolerance (relative to solution scale) for barrier attainment.
pub const CONTACT_TOL: f64 = 1e-9;

/// Maximum admissible complementarity residual (relative to solution scale).
pub const COMPLEMENTARITY_TOL: f64 = 1e-8;

/// Slack for entrywise ordering checks between minimal solutions.
pub const ORDERING_SLACK: f64 = 1e-9;

/// Reflection densities are clipped to zero only above this threshold;
/// anything below `-NU_CLIP` is a hard error.
pub const NU_CLIP: f64 = 1e-12;

/// Accuracy guard: `dt * max total exit rate` and `dt * driver Lipschitz
/// constant` must both stay below this factor.
pub const GRID_GUARD: f64 = 0.5;

/// Newton cap for the stationary (elliptic) per-mode solves.
pub const ELLIPTIC_NEWTON_CAP: usize = 200;

/// Residual target (relative to scale) for stationary solves.
pub const ELLIPTIC_RESIDUAL_TOL: f64 = 1e-12;

/// Cap on active-set (policy) updates in the obstacle subproblem.
pub const MASK_CAP: usize = 10_000;

/// Activation threshold for the active-set update: a row enters the active
/// set when the barrier constraint is violated by more than this.
pub const ACTIVE_ENTER_TOL: f64 = 1e-12;

/// Deactivation threshold: a row leaves the active set when keeping it would
/// require a reflection density below `-ACTIVE_LEAVE_TOL`.
pub const ACTIVE_LEAVE_TOL: f64 = 1e-12;

/// Runtime-adjustable solver options; defaults reproduce the constants above.
#[derive(Debug, Clone)]
pub struct Options {
    pub picard_tol: f64,
    pub picard_cap: usize,
    pub monotone_slack: f64,
    pub contact_tol: f64,
    pub complementarity_tol: f64,
    pub grid_guard: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            picard_tol: PICARD_TOL,
            picard_cap: PICARD_CAP,
            monotone_slack: MONOTONE_SLACK,
            contact_tol: CONTACT_TOL,
            complementarity_tol: COMPLEMENTARITY_TOL,
            grid_guard: GRID_GUARD,
        }
    }
}
