//! Stationary systems on the transient chain: the complementarity system
//!
//! ```text
//! -L u^j = f^j(x, u) + mu^j + nu^j,
//! u^j >= H^j(x, u),
//! nu^j >= 0,   nu^j (u^j - H^j(x, u)) = 0,
//! ```
//!
//! solved by active-set policy iteration wrapped in the frozen-barrier outer
//! scheme, its penalized approximation, and Feynman-Kac verification of the
//! result along exact sampled paths.
//!
//! With the off-diagonal arguments of a parametric driver frozen, every
//! per-mode stationary equation is *linear* (the own-variable slope is
//! constant), so policy evaluation is a direct solve: active rows pin
//! `u^j(x) = H^j(x, u_frozen)`, inactive rows keep the PDE row. A row enters
//! the active set when its obstacle constraint is violated, and leaves when
//! keeping it would require a negative reflection density. The reflection
//! density is then *defined* by the residual `nu = (-L u) - f(., u) - mu`,
//! which on a finite chain is the exact analogue of the measure in the
//! complementarity system.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bsde::TimeGrid;
use crate::chain::{mean_stderr, path_functional, Generator, MeasureDensity};
use crate::drivers::{check_no_loop, BarrierSystem, DriverKind, DriverSystem, Envelope};
use crate::error::{SolverError, SolverResult};
use crate::reflection::solve_oblique_iterative;
use crate::roots::ScalarDriver;
use crate::tol::{self, Options};

/// Solution of the stationary complementarity system.
#[derive(Debug, Clone)]
pub struct QviSolution {
    /// `N x n` value matrix.
    pub u: DMatrix<f64>,
    /// `N x n` nonnegative reflection densities.
    pub nu: DMatrix<f64>,
    /// Contact-set mask: `active[j][x]` iff `u^j(x)` sits on the obstacle.
    pub active: Vec<Vec<bool>>,
    /// Largest PDE row residual off the contact set.
    pub row_residual: f64,
    /// Most negative density before clipping (diagnostic; at least
    /// `-NU_CLIP` by construction).
    pub min_nu_before_clip: f64,
    /// Outer sweeps used.
    pub sweeps: usize,
}

impl QviSolution {
    pub fn scale(&self) -> f64 {
        1.0 + self.u.amax()
    }

    /// Max over `(j, x)` of `nu (u - H)`.
    pub fn complementarity_residual(&self, bar: &BarrierSystem) -> SolverResult<f64> {
        let modes = self.u.nrows();
        let n = self.u.ncols();
        let mut worst: f64 = 0.0;
        for x in 0..n {
            let col: Vec<f64> = (0..modes).map(|j| self.u[(j, x)]).collect();
            for j in 0..modes {
                if self.nu[(j, x)] > 0.0 {
                    if let Some(h) = bar.eval_mode(j, x, &col)? {
                        worst = worst.max(self.nu[(j, x)] * (col[j] - h));
                    }
                }
            }
        }
        Ok(worst)
    }

    /// Smallest margin `u^j - H^j(x, u)` over modes with obstacles.
    pub fn domination_margin(&self, bar: &BarrierSystem) -> SolverResult<f64> {
        let modes = self.u.nrows();
        let n = self.u.ncols();
        let mut margin = f64::INFINITY;
        for x in 0..n {
            let col: Vec<f64> = (0..modes).map(|j| self.u[(j, x)]).collect();
            for j in 0..modes {
                if let Some(h) = bar.eval_mode(j, x, &col)? {
                    margin = margin.min(col[j] - h);
                }
            }
        }
        Ok(margin)
    }
}

/// Starting point of the outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPoint {
    /// From the subsolution envelope; iterates increase to the minimal
    /// solution.
    Lower,
    /// From the supersolution envelope; on decoupled cost-form instances the
    /// iterates decrease to the same (unique) solution.
    Upper,
}

/// Inner active-set solve of one obstacle problem with a fixed barrier
/// vector: `min(base u - rhs, u - h) = 0` rowwise. `base` must be an
/// M-matrix. The mask is warm-started and updated in place.
fn obstacle_solve(
    base: &DMatrix<f64>,
    rhs: &DVector<f64>,
    h: Option<&DVector<f64>>,
    mask: &mut [bool],
) -> SolverResult<DVector<f64>> {
    let n = base.nrows();
    let h = match h {
        None => {
            mask.iter_mut().for_each(|m| *m = false);
            return base
                .clone()
                .lu()
                .solve(rhs)
                .ok_or_else(|| SolverError::NonTransient("singular stationary system".into()));
        }
        Some(h) => h,
    };
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    for _ in 0..tol::MASK_CAP {
        if !seen.insert(mask.to_vec()) {
            return Err(SolverError::MaskCycle(format!(
                "active set revisited with {} active rows",
                mask.iter().filter(|&&m| m).count()
            )));
        }
        let mut a = base.clone();
        let mut b = rhs.clone();
        for x in 0..n {
            if mask[x] {
                for c in 0..n {
                    a[(x, c)] = if c == x { 1.0 } else { 0.0 };
                }
                b[x] = h[x];
            }
        }
        let u = a
            .lu()
            .solve(&b)
            .ok_or_else(|| SolverError::NonTransient("singular mixed system".into()))?;
        let mut changed = false;
        let implied = base * &u;
        for x in 0..n {
            if mask[x] {
                // Keeping the row active must not require a negative density.
                if implied[x] - rhs[x] < -tol::ACTIVE_LEAVE_TOL {
                    mask[x] = false;
                    changed = true;
                }
            } else if u[x] < h[x] - tol::ACTIVE_ENTER_TOL {
                mask[x] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(u);
        }
    }
    Err(SolverError::MaskCycle(
        "active-set iteration hit its cap".into(),
    ))
}

/// Shared outer scheme: freeze off-diagonal driver arguments and the barrier
/// at the previous iterate, solve per-mode obstacle problems, repeat.
fn stationary_engine(
    gen: &Generator,
    drv: &DriverSystem,
    bar: Option<&BarrierSystem>,
    env: &Envelope,
    start: StartPoint,
    opts: &Options,
) -> SolverResult<(DMatrix<f64>, Vec<Vec<bool>>, usize)> {
    let n = gen.state_count();
    let modes = drv.mode_count();
    if drv.state_count() != n
        || env.lower.nrows() != modes
        || env.lower.ncols() != n
        || bar.map(|b| b.mode_count() != modes || b.state_count() != n) == Some(true)
    {
        return Err(SolverError::DimensionMismatch(
            "generator, driver, barrier and envelope dimensions disagree".into(),
        ));
    }
    let neg_l = -gen.rates();
    // Frozen off-diagonals make each mode equation linear:
    // (-L - diag(slope)) u = intercept(frozen) + mu.
    let bases: Vec<DMatrix<f64>> = (0..modes)
        .map(|j| {
            let mut a = neg_l.clone();
            for x in 0..n {
                a[(x, x)] -= drv.own_slope(j, x, 0.0);
            }
            a
        })
        .collect();

    let mut u = match start {
        StartPoint::Lower => env.lower.clone(),
        StartPoint::Upper => env.upper.clone(),
    };
    let monotone_up = start == StartPoint::Lower;
    let monotone_down = start == StartPoint::Upper
        && drv.kind() == DriverKind::Decoupled
        && bar.map(|b| b.is_cost_form()).unwrap_or(true);
    let scale = 1.0 + env.scale();
    let slack = opts.monotone_slack * scale;
    let mut masks: Vec<Vec<bool>> = vec![vec![false; n]; modes];

    let mut sweeps = 0usize;
    let mut prev_increment = f64::INFINITY;
    let mut polish_left = tol::POLISH_CAP;
    loop {
        sweeps += 1;
        if sweeps > opts.picard_cap {
            return Err(SolverError::NoConvergence(format!(
                "stationary iteration still moving after {} sweeps",
                opts.picard_cap
            )));
        }
        let mut u_new = DMatrix::zeros(modes, n);
        for j in 0..modes {
            let mut rhs = DVector::zeros(n);
            let mut h: Option<DVector<f64>> = None;
            if let Some(b) = bar {
                if !b.adjacency()[j].is_empty() {
                    let mut hv = DVector::zeros(n);
                    for x in 0..n {
                        let col: Vec<f64> = (0..modes).map(|i| u[(i, x)]).collect();
                        hv[x] = b
                            .eval_mode(j, x, &col)?
                            .expect("nonempty adjacency gives a finite barrier");
                    }
                    h = Some(hv);
                }
            }
            for x in 0..n {
                let col: Vec<f64> = (0..modes).map(|i| u[(i, x)]).collect();
                rhs[x] = drv.eval_frozen(j, x, &col, 0.0) + drv.mu()[j].values()[x];
            }
            let uj = obstacle_solve(&bases[j], &rhs, h.as_ref(), &mut masks[j])?;
            for x in 0..n {
                u_new[(j, x)] = uj[x];
            }
        }
        let mut increment: f64 = 0.0;
        for j in 0..modes {
            for x in 0..n {
                let d = u_new[(j, x)] - u[(j, x)];
                if monotone_up && d < -slack {
                    return Err(SolverError::MonotonicityBroken(format!(
                        "stationary iterate decreased by {} at (j={j}, x={x})",
                        -d
                    )));
                }
                if monotone_down && d > slack {
                    return Err(SolverError::MonotonicityBroken(format!(
                        "upper-start iterate increased by {d} at (j={j}, x={x})"
                    )));
                }
                if monotone_up && u_new[(j, x)] > env.upper[(j, x)] + slack {
                    return Err(SolverError::MonotonicityBroken(format!(
                        "iterate {} exceeded the upper envelope {} at (j={j}, x={x})",
                        u_new[(j, x)],
                        env.upper[(j, x)]
                    )));
                }
                increment = increment.max(d.abs());
            }
        }
        u = u_new;
        if increment == 0.0 {
            break;
        }
        if increment < opts.picard_tol {
            if polish_left == 0 || increment >= prev_increment {
                break;
            }
            polish_left -= 1;
        }
        prev_increment = increment;
    }
    Ok((u, masks, sweeps))
}

/// Minimal solution of the unconstrained stationary system
/// `-L u^j = f^j(x, u) + mu^j` by monotone Picard iteration from the lower
/// envelope.
pub fn solve_pde_system(
    gen: &Generator,
    drv: &DriverSystem,
    env: &Envelope,
    opts: &Options,
) -> SolverResult<DMatrix<f64>> {
    let (u, _, _) = stationary_engine(gen, drv, None, env, StartPoint::Lower, opts)?;
    Ok(u)
}

/// Minimal solution of the complementarity system by active-set policy
/// iteration inside the frozen-barrier outer scheme.
pub fn solve_qvi_policy_iteration(
    gen: &Generator,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    env: &Envelope,
    start: StartPoint,
    opts: &Options,
) -> SolverResult<QviSolution> {
    let (no_loop, witness) = check_no_loop(bar);
    if !no_loop {
        return Err(SolverError::NoLoopViolation(format!(
            "cycle {:?} closes",
            witness.map(|w| w.cycle).unwrap_or_default()
        )));
    }
    let (u, _masks, sweeps) = stationary_engine(gen, drv, Some(bar), env, start, opts)?;
    let n = gen.state_count();
    let modes = drv.mode_count();
    let neg_l = -gen.rates();

    // The density is defined by the residual of the first equation.
    let mut nu = DMatrix::zeros(modes, n);
    let mut active = vec![vec![false; n]; modes];
    let mut row_residual: f64 = 0.0;
    let mut min_nu: f64 = 0.0;
    let scale = 1.0 + u.amax();
    for j in 0..modes {
        let uj = DVector::from_fn(n, |x, _| u[(j, x)]);
        let lu_row = &neg_l * &uj;
        for x in 0..n {
            let col: Vec<f64> = (0..modes).map(|i| u[(i, x)]).collect();
            let f_val = drv.eval_frozen(j, x, &col, col[j]);
            let raw = lu_row[x] - f_val - drv.mu()[j].values()[x];
            let contact = match bar.eval_mode(j, x, &col)? {
                Some(h) => col[j] - h <= opts.contact_tol * scale,
                None => false,
            };
            min_nu = min_nu.min(raw);
            if raw < -tol::NU_CLIP {
                return Err(SolverError::MonotonicityBroken(format!(
                    "reflection density {raw} below the clip threshold at (j={j}, x={x})"
                )));
            }
            if contact {
                active[j][x] = true;
                nu[(j, x)] = raw.max(0.0);
            } else {
                // Off the contact set the PDE row must hold exactly.
                row_residual = row_residual.max(raw.abs());
            }
        }
    }
    if row_residual > 1e-9 * scale {
        return Err(SolverError::NoConvergence(format!(
            "stationary row residual {row_residual} off the contact set at scale {scale}"
        )));
    }
    let sol = QviSolution {
        u,
        nu,
        active,
        row_residual,
        min_nu_before_clip: min_nu,
        sweeps,
    };
    let comp = sol.complementarity_residual(bar)?;
    if comp > opts.complementarity_tol * scale {
        return Err(SolverError::NoConvergence(format!(
            "complementarity residual {comp} above tolerance"
        )));
    }
    Ok(sol)
}

/// Penalized stationary approximations
/// `-L u^j = f^j(x, u) + n (u^j - H^j(x, u))^- + mu^j` at increasing levels;
/// the sequence increases to the policy-iteration solution.
pub fn solve_qvi_penalized(
    gen: &Generator,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    env: &Envelope,
    levels: &[f64],
    opts: &Options,
) -> SolverResult<Vec<DMatrix<f64>>> {
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SolverError::InvalidGrid(
            "penalty levels must be strictly increasing".into(),
        ));
    }
    let n = gen.state_count();
    let modes = drv.mode_count();
    let neg_l = -gen.rates();
    let zero = DVector::zeros(n);
    let scale = 1.0 + env.scale();
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(levels.len());

    for &level in levels {
        // Outer Picard from the lower envelope with frozen off-diagonals and
        // frozen obstacle arguments; the per-mode solve is semismooth because
        // of the penalty kink.
        let mut u = env.lower.clone();
        let mut sweeps = 0usize;
        let mut prev_increment = f64::INFINITY;
        let mut polish_left = tol::POLISH_CAP;
        loop {
            sweeps += 1;
            if sweeps > opts.picard_cap {
                return Err(SolverError::NoConvergence(format!(
                    "penalized stationary iteration at level {level} hit the cap"
                )));
            }
            let mut u_new = DMatrix::zeros(modes, n);
            for j in 0..modes {
                let mut h: Vec<Option<f64>> = vec![None; n];
                let mut intercept = DVector::zeros(n);
                for x in 0..n {
                    let col: Vec<f64> = (0..modes).map(|i| u[(i, x)]).collect();
                    h[x] = bar.eval_mode(j, x, &col)?;
                    intercept[x] = drv.eval_frozen(j, x, &col, 0.0) + drv.mu()[j].values()[x];
                }
                let slope = DVector::from_fn(n, |x, _| drv.own_slope(j, x, 0.0));
                let driver = PenalizedRow {
                    intercept: &intercept,
                    slope: &slope,
                    h: &h,
                    level,
                };
                let start = DVector::from_fn(n, |x, _| u[(j, x)]);
                let uj = crate::roots::elliptic_scalar_solve(&neg_l, &driver, &zero, &start)?;
                for x in 0..n {
                    u_new[(j, x)] = uj[x];
                }
            }
            let mut increment: f64 = 0.0;
            for j in 0..modes {
                for x in 0..n {
                    let d = u_new[(j, x)] - u[(j, x)];
                    if d < -opts.monotone_slack * scale {
                        return Err(SolverError::MonotonicityBroken(format!(
                            "penalized iterate decreased by {} at (j={j}, x={x})",
                            -d
                        )));
                    }
                    increment = increment.max(d.abs());
                }
            }
            u = u_new;
            if increment == 0.0 {
                break;
            }
            if increment < opts.picard_tol {
                if polish_left == 0 || increment >= prev_increment {
                    break;
                }
                polish_left -= 1;
            }
            prev_increment = increment;
        }
        if let Some(prev) = out.last() {
            for j in 0..modes {
                for x in 0..n {
                    if u[(j, x)] < prev[(j, x)] - tol::ORDERING_SLACK * scale {
                        return Err(SolverError::MonotonicityBroken(format!(
                            "penalized value decreased between levels at (j={j}, x={x})"
                        )));
                    }
                }
            }
        }
        out.push(u);
    }
    Ok(out)
}

/// Per-state penalized row `intercept + slope * a + level (h - a)^+`; linear
/// plus a kink, nonincreasing in `a`.
struct PenalizedRow<'a> {
    intercept: &'a DVector<f64>,
    slope: &'a DVector<f64>,
    h: &'a [Option<f64>],
    level: f64,
}

impl ScalarDriver for PenalizedRow<'_> {
    fn value(&self, x: usize, a: f64) -> f64 {
        let mut v = self.intercept[x] + self.slope[x] * a;
        if let Some(h) = self.h[x] {
            v += self.level * (h - a).max(0.0);
        }
        v
    }
    fn slope(&self, x: usize, a: f64) -> f64 {
        let mut s = self.slope[x];
        if let Some(h) = self.h[x] {
            if a < h {
                s -= self.level;
            }
        }
        s
    }
}

/// Feynman-Kac on one mode: Monte Carlo estimate of the integral payoff
/// against the stationary value.
#[derive(Debug, Clone)]
pub struct FkModeReport {
    pub mode: usize,
    pub target: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub z_score: f64,
}

/// Verifies `u^j(x0) = E integral of (f^j(X, u(X)) + mu^j(X) + nu^j(X)) dr`
/// by exact path sampling; returns one report per mode.
pub fn feynman_kac_check(
    gen: &Generator,
    sol: &QviSolution,
    drv: &DriverSystem,
    x0: usize,
    paths: usize,
    seed: u64,
    horizon_cap: f64,
) -> SolverResult<Vec<FkModeReport>> {
    let n = gen.state_count();
    let modes = drv.mode_count();
    if sol.u.ncols() != n || sol.u.nrows() != modes {
        return Err(SolverError::DimensionMismatch(
            "solution does not match the instance".into(),
        ));
    }
    if paths == 0 {
        return Err(SolverError::InvalidGrid("paths must be positive".into()));
    }
    let mut reports = Vec::with_capacity(modes);
    for j in 0..modes {
        let mut g = DVector::zeros(n);
        for x in 0..n {
            let col: Vec<f64> = (0..modes).map(|i| sol.u[(i, x)]).collect();
            g[x] = drv.eval_frozen(j, x, &col, col[j]) + drv.mu()[j].values()[x] + sol.nu[(j, x)];
        }
        let density = MeasureDensity::new(g)?;
        let values: SolverResult<Vec<f64>> = (0..paths)
            .into_par_iter()
            .map(|i| {
                let path =
                    gen.sample_path(x0, seed.wrapping_add((j * paths + i) as u64), horizon_cap)?;
                path_functional(&path, &density, 0.0)
            })
            .collect();
        let values = values?;
        let (mean, stderr) = mean_stderr(&values);
        let target = sol.u[(j, x0)];
        let z = if stderr > 0.0 {
            (mean - target).abs() / stderr
        } else if (mean - target).abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        reports.push(FkModeReport {
            mode: j,
            target,
            estimate: mean,
            stderr,
            z_score: z,
        });
    }
    Ok(reports)
}

/// Horizon-truncation study: gaps between finite-horizon reflected solves
/// (terminal pinned at the lower envelope) and the stationary solution.
#[derive(Debug, Clone)]
pub struct HorizonReport {
    pub horizons: Vec<f64>,
    pub gaps: Vec<f64>,
    /// Worst-case survival over each horizon increment.
    pub survival_factors: Vec<f64>,
    /// `gaps[i+1] / gaps[i]`.
    pub ratios: Vec<f64>,
}

/// Runs the reflected grid solver at each horizon with terminal data equal
/// to the lower envelope and reports the sup-gap to the stationary solution;
/// transience makes the gap shrink at least as fast as the survival mass.
pub fn elliptic_from_horizon(
    gen: &Generator,
    dt: f64,
    horizons: &[f64],
    drv: &DriverSystem,
    bar: &BarrierSystem,
    env: &Envelope,
    opts: &Options,
) -> SolverResult<HorizonReport> {
    if horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SolverError::InvalidGrid(
            "horizons must be strictly increasing".into(),
        ));
    }
    let stationary = solve_qvi_policy_iteration(gen, drv, bar, env, StartPoint::Lower, opts)?;
    let modes = drv.mode_count();
    let n = gen.state_count();
    let terminal: Vec<DVector<f64>> = (0..modes)
        .map(|j| DVector::from_fn(n, |x, _| env.lower[(j, x)]))
        .collect();
    let drv_horizon = drv.with_terminal(terminal)?;
    let mut gaps = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let steps = (t / dt).round().max(1.0) as usize;
        let grid = TimeGrid::new(dt, steps)?;
        let sol = solve_oblique_iterative(gen, &grid, &drv_horizon, bar, env, opts)?;
        let mut gap: f64 = 0.0;
        for j in 0..modes {
            for x in 0..n {
                gap = gap.max((sol.y()[0][(j, x)] - stationary.u[(j, x)]).abs());
            }
        }
        gaps.push(gap);
    }
    let mut survival_factors = Vec::new();
    let mut ratios = Vec::new();
    for i in 0..horizons.len() - 1 {
        let inc = horizons[i + 1] - horizons[i];
        survival_factors.push(gen.transition_step(inc)?.survival_factor());
        ratios.push(if gaps[i] > 0.0 {
            gaps[i + 1] / gaps[i]
        } else {
            0.0
        });
    }
    Ok(HorizonReport {
        horizons: horizons.to_vec(),
        gaps,
        survival_factors,
        ratios,
    })
}

/// Total-variation bound on the reflection densities:
/// `|nu|_TV <= |f(., u)|_L1 + |f(., upper)|_L1 + 2 |mu|_TV + |beta|_TV`,
/// where `beta = (-L upper) - f(., upper) - mu` is the supersolution surplus.
/// Returns `(lhs, rhs)`.
pub fn tv_bound(
    gen: &Generator,
    drv: &DriverSystem,
    env: &Envelope,
    sol: &QviSolution,
) -> SolverResult<(f64, f64)> {
    let n = gen.state_count();
    let modes = drv.mode_count();
    let neg_l = -gen.rates();
    let mut lhs = 0.0;
    let mut f_u_l1 = 0.0;
    let mut f_up_l1 = 0.0;
    let mut mu_tv = 0.0;
    let mut beta_tv = 0.0;
    for j in 0..modes {
        mu_tv += drv.mu()[j].tv_norm();
        let upper_j = DVector::from_fn(n, |x, _| env.upper[(j, x)]);
        let lu_up = &neg_l * &upper_j;
        for x in 0..n {
            lhs += sol.nu[(j, x)];
            let col: Vec<f64> = (0..modes).map(|i| sol.u[(i, x)]).collect();
            f_u_l1 += drv.eval_frozen(j, x, &col, col[j]).abs();
            let up_col: Vec<f64> = (0..modes).map(|i| env.upper[(i, x)]).collect();
            let f_up = drv.eval_frozen(j, x, &up_col, up_col[j]);
            f_up_l1 += f_up.abs();
            beta_tv += (lu_up[x] - f_up - drv.mu()[j].values()[x]).abs();
        }
    }
    Ok((lhs, f_u_l1 + f_up_l1 + 2.0 * mu_tv + beta_tv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{build_envelope, BarrierForm, Coupling};
    use approx::assert_abs_diff_eq;

    fn single_state_gen(kappa: f64) -> Generator {
        Generator::from_rates(DMatrix::from_row_slice(1, 1, &[-kappa]), None).unwrap()
    }

    fn decoupled(n: usize, psi: &[f64]) -> DriverSystem {
        DriverSystem::new(
            psi.iter().map(|&p| DVector::from_element(n, p)).collect(),
            Coupling::Decoupled,
            vec![MeasureDensity::zero(n); psi.len()],
            vec![DVector::zeros(n); psi.len()],
        )
        .unwrap()
    }

    fn two_mode_bar(n: usize, c: f64) -> BarrierSystem {
        BarrierSystem::new(
            n,
            vec![vec![1], vec![0]],
            vec![
                vec![DVector::from_element(n, c)],
                vec![DVector::from_element(n, c)],
            ],
            BarrierForm::CostForm,
            c,
        )
        .unwrap()
    }

    #[test]
    fn pde_system_decoupled_is_resolvent() {
        let gen =
            Generator::from_rates(DMatrix::from_row_slice(2, 2, &[-1.5, 1.0, 0.7, -1.4]), None)
                .unwrap();
        let drv = decoupled(2, &[3.0, 1.0]);
        let env = build_envelope(&gen, &drv, &BarrierSystem::none(2, 2)).unwrap();
        let u = solve_pde_system(&gen, &drv, &env, &Options::default()).unwrap();
        for (j, psi) in [3.0, 1.0].iter().enumerate() {
            let expect = gen
                .resolvent_solve(&MeasureDensity::from_slice(&[*psi, *psi]).unwrap())
                .unwrap();
            for x in 0..2 {
                assert_abs_diff_eq!(u[(j, x)], expect[x], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn pde_system_scalar_affine_halving() {
        // u = 1 - u on a single unit-killing state: u = 0.5.
        let gen = single_state_gen(1.0);
        let drv = DriverSystem::new(
            vec![DVector::from_element(1, 1.0)],
            Coupling::Affine {
                g: vec![DMatrix::from_row_slice(1, 1, &[-1.0])],
            },
            vec![MeasureDensity::zero(1)],
            vec![DVector::zeros(1)],
        )
        .unwrap();
        let env = build_envelope(&gen, &drv, &BarrierSystem::none(1, 1)).unwrap();
        let u = solve_pde_system(&gen, &drv, &env, &Options::default()).unwrap();
        assert_abs_diff_eq!(u[(0, 0)], 0.5, epsilon = 1e-11);
    }

    #[test]
    fn pde_system_affine_matches_truncated_neumann_series() {
        // Small coupling: u = sum_k ((-L)^{-1} G)^k (-L)^{-1} (psi + mu).
        let gen =
            Generator::from_rates(DMatrix::from_row_slice(2, 2, &[-1.5, 1.0, 0.7, -1.4]), None)
                .unwrap();
        let g_mat = DMatrix::from_row_slice(2, 2, &[-0.2, 0.1, 0.15, -0.2]);
        let drv = DriverSystem::new(
            vec![
                DVector::from_row_slice(&[1.0, 0.5]),
                DVector::from_row_slice(&[0.3, 0.8]),
            ],
            Coupling::Affine {
                g: vec![g_mat.clone(), g_mat.clone()],
            },
            vec![MeasureDensity::zero(2); 2],
            vec![DVector::zeros(2); 2],
        )
        .unwrap();
        let env = build_envelope(&gen, &drv, &BarrierSystem::none(2, 2)).unwrap();
        let u = solve_pde_system(&gen, &drv, &env, &Options::default()).unwrap();

        // Oracle: Neumann series on the stacked 4x4 system.
        let mut term = DMatrix::zeros(2, 2);
        for j in 0..2 {
            let src = MeasureDensity::new(drv.psi()[j].clone()).unwrap();
            let r = gen.resolvent_solve(&src).unwrap();
            for x in 0..2 {
                term[(j, x)] = r[x];
            }
        }
        let mut acc = term.clone();
        for _ in 0..200 {
            // next^j = (-L)^{-1} (G term)^j per state.
            let mut next = DMatrix::zeros(2, 2);
            for j in 0..2 {
                let mut src = DVector::zeros(2);
                for x in 0..2 {
                    for i in 0..2 {
                        src[x] += g_mat[(j, i)] * term[(i, x)];
                    }
                }
                let r = gen.resolvent_solve_vec(&src).unwrap();
                for x in 0..2 {
                    next[(j, x)] = r[x];
                }
            }
            acc += &next;
            if next.amax() < 1e-14 {
                break;
            }
            term = next;
        }
        for j in 0..2 {
            for x in 0..2 {
                assert_abs_diff_eq!(u[(j, x)], acc[(j, x)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn qvi_two_mode_hand_solve() {
        // psi = (3, 1), c = 1, kappa = 1: u = (3, 2), nu = (0, 1), only the
        // second mode sits on its obstacle.
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0, 1.0]);
        let bar = two_mode_bar(1, 1.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let sol = solve_qvi_policy_iteration(
            &gen,
            &drv,
            &bar,
            &env,
            StartPoint::Lower,
            &Options::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.u[(0, 0)], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.u[(1, 0)], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.nu[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.nu[(1, 0)], 1.0, epsilon = 1e-10);
        assert!(!sol.active[0][0]);
        assert!(sol.active[1][0]);
        assert!(sol.complementarity_residual(&bar).unwrap() <= 1e-8 * sol.scale());
    }

    #[test]
    fn qvi_large_costs_equal_unconstrained() {
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0, 1.0]);
        let bar = two_mode_bar(1, 10.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let sol = solve_qvi_policy_iteration(
            &gen,
            &drv,
            &bar,
            &env,
            StartPoint::Lower,
            &Options::default(),
        )
        .unwrap();
        let free = solve_pde_system(&gen, &drv, &env, &Options::default()).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(sol.u[(j, 0)], free[(j, 0)], epsilon = 1e-10);
            assert_eq!(sol.nu[(j, 0)], 0.0);
            assert!(!sol.active[j][0]);
        }
    }

    #[test]
    fn qvi_single_mode_no_obstacle() {
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0]);
        let bar = BarrierSystem::none(1, 1);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let sol = solve_qvi_policy_iteration(
            &gen,
            &drv,
            &bar,
            &env,
            StartPoint::Lower,
            &Options::default(),
        )
        .unwrap();
        assert_eq!(sol.nu[(0, 0)], 0.0);
        assert_abs_diff_eq!(sol.u[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn qvi_upper_start_agrees_with_lower_start() {
        let gen = Generator::from_rates(
            DMatrix::from_row_slice(3, 3, &[-1.6, 1.0, 0.3, 0.5, -1.5, 0.6, 0.2, 0.9, -1.5]),
            None,
        )
        .unwrap();
        let drv = decoupled(3, &[3.0, 1.0]);
        let bar = two_mode_bar(3, 0.8);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let opts = Options::default();
        let lo =
            solve_qvi_policy_iteration(&gen, &drv, &bar, &env, StartPoint::Lower, &opts).unwrap();
        let hi =
            solve_qvi_policy_iteration(&gen, &drv, &bar, &env, StartPoint::Upper, &opts).unwrap();
        for j in 0..2 {
            for x in 0..3 {
                assert_abs_diff_eq!(lo.u[(j, x)], hi.u[(j, x)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn penalized_scalar_closed_form_sequence() {
        // Level n: u2 solves u = 1 + n (u - (u1 - 1))^- with u1 = 3, so
        // u2 = (1 + 2n) / (1 + n); level 0 gives the unconstrained pair.
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0, 1.0]);
        let bar = two_mode_bar(1, 1.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let opts = Options::default();
        let levels = [1.0, 4.0, 16.0, 64.0, 256.0];
        let seq = solve_qvi_penalized(&gen, &drv, &bar, &env, &levels, &opts).unwrap();
        for (k, &n_level) in levels.iter().enumerate() {
            let expect = (1.0 + 2.0 * n_level) / (1.0 + n_level);
            assert_abs_diff_eq!(seq[k][(0, 0)], 3.0, epsilon = 1e-9);
            assert_abs_diff_eq!(seq[k][(1, 0)], expect, epsilon = 1e-9);
        }
        // Final gap to u2 = 2 below 4e-3.
        let last = seq.last().unwrap();
        assert!((2.0 - last[(1, 0)]).abs() < 4e-3);

        let free = solve_pde_system(&gen, &drv, &env, &opts).unwrap();
        let with_zero = solve_qvi_penalized(&gen, &drv, &bar, &env, &[0.0, 1.0], &opts).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(with_zero[0][(j, 0)], free[(j, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn penalized_binding_free_constant_in_level() {
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0, 1.0]);
        let bar = two_mode_bar(1, 50.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let seq = solve_qvi_penalized(&gen, &drv, &bar, &env, &[1.0, 256.0], &Options::default())
            .unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(seq[0][(j, 0)], seq[1][(j, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn feynman_kac_two_mode_instance() {
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0, 1.0]);
        let bar = two_mode_bar(1, 1.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let sol = solve_qvi_policy_iteration(
            &gen,
            &drv,
            &bar,
            &env,
            StartPoint::Lower,
            &Options::default(),
        )
        .unwrap();
        let reports = feynman_kac_check(&gen, &sol, &drv, 0, 100_000, 17, 40.0).unwrap();
        for r in &reports {
            assert!(r.z_score <= 3.0, "mode {} z = {}", r.mode, r.z_score);
        }
    }

    #[test]
    fn feynman_kac_zero_instance() {
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[0.0, 0.0]);
        let bar = two_mode_bar(1, 1.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let sol = solve_qvi_policy_iteration(
            &gen,
            &drv,
            &bar,
            &env,
            StartPoint::Lower,
            &Options::default(),
        )
        .unwrap();
        let reports = feynman_kac_check(&gen, &sol, &drv, 0, 100, 3, 40.0).unwrap();
        for r in &reports {
            assert_eq!(r.estimate, 0.0);
            assert_eq!(r.z_score, 0.0);
        }
    }

    #[test]
    fn horizon_truncation_decays_with_survival() {
        let gen = single_state_gen(1.0);
        let drv = decoupled(1, &[3.0, 1.0]);
        let bar = two_mode_bar(1, 1.0);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let report = elliptic_from_horizon(
            &gen,
            1e-3,
            &[1.0, 2.0, 3.0, 4.0],
            &drv,
            &bar,
            &env,
            &Options::default(),
        )
        .unwrap();
        // Survival over a unit increment is e^{-1}.
        for (i, &ratio) in report.ratios.iter().enumerate() {
            assert!(
                ratio <= 1.1 * report.survival_factors[i],
                "ratio {ratio} vs survival {}",
                report.survival_factors[i]
            );
        }
        // Horizon 0 limit: the gap at the shortest horizon is close to the
        // distance from the lower envelope, and decreasing.
        assert!(report.gaps[0] > report.gaps[1]);
    }

    #[test]
    fn tv_bound_holds() {
        let gen =
            Generator::from_rates(DMatrix::from_row_slice(2, 2, &[-1.5, 1.0, 0.7, -1.4]), None)
                .unwrap();
        let drv = decoupled(2, &[3.0, 1.0]);
        let bar = two_mode_bar(2, 0.5);
        let env = build_envelope(&gen, &drv, &bar).unwrap();
        let sol = solve_qvi_policy_iteration(
            &gen,
            &drv,
            &bar,
            &env,
            StartPoint::Lower,
            &Options::default(),
        )
        .unwrap();
        let (lhs, rhs) = tv_bound(&gen, &drv, &env, &sol).unwrap();
        assert!(lhs <= rhs + 1e-9, "TV bound violated: {lhs} > {rhs}");
    }
}
