//! Scalar root solves for implicit backward steps and monotone Newton
//! iterations for stationary per-mode equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{SolverError, SolverResult};
use crate::tol;

/// A scalar driver slice `a -> f(x, a)` with an own-variable slope used by
/// Newton steps. Monotone solvability of the implicit step needs
/// `a -> a - dt f(x, a)` strictly increasing; drivers that are nonincreasing
/// in `a` satisfy this for every `dt`.
pub trait ScalarDriver {
    fn value(&self, x: usize, a: f64) -> f64;

    /// Derivative in `a`; a one-sided secant fallback is enough for the
    /// safeguarded Newton below.
    fn slope(&self, x: usize, a: f64) -> f64 {
        let h = 1e-6 * (1.0 + a.abs());
        (self.value(x, a + h) - self.value(x, a)) / h
    }
}

/// Zero driver; the implicit step degenerates to the kernel application.
pub struct ZeroDriver;

impl ScalarDriver for ZeroDriver {
    fn value(&self, _x: usize, _a: f64) -> f64 {
        0.0
    }
    fn slope(&self, _x: usize, _a: f64) -> f64 {
        0.0
    }
}

impl<F> ScalarDriver for F
where
    F: Fn(usize, f64) -> f64,
{
    fn value(&self, x: usize, a: f64) -> f64 {
        self(x, a)
    }
}

/// Solves `y = c + dt * f(x, y)` for the unique root of the monotone map
/// `y - dt f(x, y)`.
///
/// The initial guess `c + dt f(x, c)` is exact for drivers constant in `y`,
/// so decoupled solves cost one driver evaluation and reproduce the explicit
/// step bitwise. Otherwise the root is bracketed by geometric expansion and
/// polished by bisection-safeguarded Newton.
pub fn implicit_step<D: ScalarDriver + ?Sized>(
    c: f64,
    dt: f64,
    x: usize,
    driver: &D,
) -> SolverResult<f64> {
    let tol_abs = tol::ROOT_TOL * (1.0 + c.abs());
    let phi = |y: f64| y - dt * driver.value(x, y) - c;

    let mut y = c + dt * driver.value(x, c);
    let mut r = phi(y);
    if r.abs() <= tol_abs {
        return Ok(y);
    }

    // Bracket the root around the current iterate.
    let mut lo = y - 1.0;
    let mut hi = y + 1.0;
    let mut flo = phi(lo);
    let mut fhi = phi(hi);
    let mut width = 1.0;
    let mut expansions = 0usize;
    while flo > 0.0 || fhi < 0.0 {
        expansions += 1;
        if expansions > tol::BISECT_CAP || !flo.is_finite() || !fhi.is_finite() {
            return Err(SolverError::RootBracketFailure(format!(
                "no sign change in [{lo}, {hi}] for state {x}; driver may not be nonincreasing"
            )));
        }
        width *= 2.0;
        if flo > 0.0 {
            lo -= width;
            flo = phi(lo);
        }
        if fhi < 0.0 {
            hi += width;
            fhi = phi(hi);
        }
    }

    // Safeguarded search: prefer a Newton step when it stays inside the
    // bracket and shrinks the residual, otherwise bisect. Kinked drivers
    // (penalty terms) degrade gracefully to pure bisection near the kink.
    y = 0.5 * (lo + hi);
    r = phi(y);
    let mut newton_budget = tol::NEWTON_CAP;
    for _ in 0..tol::BISECT_CAP {
        if r.abs() <= tol_abs || hi - lo <= f64::EPSILON * (1.0 + y.abs()) {
            return Ok(y);
        }
        if r > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let mut next = 0.5 * (lo + hi);
        if newton_budget > 0 {
            let d = 1.0 - dt * driver.slope(x, y);
            if d.is_finite() && d > 0.0 {
                let candidate = y - r / d;
                if candidate > lo && candidate < hi {
                    next = candidate;
                } else {
                    newton_budget -= 1;
                }
            }
        }
        y = next;
        r = phi(y);
    }
    if r.abs() <= 1e3 * tol_abs {
        Ok(y)
    } else {
        Err(SolverError::RootBracketFailure(format!(
            "residual {r} after polish for state {x}"
        )))
    }
}

/// Solves the stationary system `-L u = g(x, u(x)) + s(x)` with a diagonal
/// nonlinearity by damped (semismooth) Newton. The Jacobian `-L - diag(g')`
/// keeps the M-matrix structure whenever `g` is nonincreasing in `u(x)`.
pub fn elliptic_scalar_solve<D: ScalarDriver + ?Sized>(
    neg_l: &DMatrix<f64>,
    driver: &D,
    source: &DVector<f64>,
    start: &DVector<f64>,
) -> SolverResult<DVector<f64>> {
    let n = neg_l.nrows();
    let mut u = start.clone();
    let residual = |u: &DVector<f64>| -> DVector<f64> {
        let mut r = neg_l * u;
        for x in 0..n {
            r[x] -= driver.value(x, u[x]) + source[x];
        }
        r
    };
    let mut r = residual(&u);
    let scale = 1.0 + source.amax() + start.amax();
    let target = tol::ELLIPTIC_RESIDUAL_TOL * scale;
    for _ in 0..tol::ELLIPTIC_NEWTON_CAP {
        let rn = r.amax();
        if rn <= target {
            return Ok(u);
        }
        let mut jac = neg_l.clone();
        for x in 0..n {
            jac[(x, x)] -= driver.slope(x, u[x]);
        }
        let delta = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| SolverError::NoConvergence("singular Newton system".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &u - &delta * t;
            let rc = residual(&candidate);
            if rc.amax() < rn {
                u = candidate;
                r = rc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(SolverError::NoConvergence(
                "stationary Newton stalled".into(),
            ));
        }
    }
    if r.amax() <= 10.0 * target {
        Ok(u)
    } else {
        Err(SolverError::NoConvergence(format!(
            "stationary Newton residual {} above target {}",
            r.amax(),
            target
        )))
    }
}
