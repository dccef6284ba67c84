//! Reflected backward equations: Snell envelopes, single reflected solves,
//! the iterated oblique-reflection scheme and its penalized approximation.
//!
//! A reflected backward step produces the candidate `y*` from the unreflected
//! implicit solve and then clamps, `Y_k = max(barrier_k, y*)`, recording
//! `dK_k = Y_k - y* >= 0`. The cumulative `K` is the minimal amount of upward
//! forcing that keeps `Y` above the obstacle; minimality is verified through
//! the complementarity residual `max dK (Y - H)`, which must vanish at the
//! reported tolerance.
//!
//! The oblique system freezes both the off-diagonal driver arguments and the
//! obstacle `H^j(., Y^{m-1})` at the previous outer iterate, solves per-mode
//! reflected equations, and repeats; iterates increase monotonically from the
//! lower-envelope process. The penalized variant replaces the reflection by
//! the implicit driver term `n (Y^j - H^j(., Y))^-` and converges upward to
//! the reflected solution as the level `n` grows.

use nalgebra::{DMatrix, DVector};

use crate::bsde::{
    scalar_backward, system_engine, BsdeSolution, Homogeneous, SolveMeta, StepObstacle,
    SystemObstacle, TimeGrid,
};
use crate::chain::Generator;
use crate::drivers::{check_no_loop, BarrierSystem, DriverSystem, Envelope};
use crate::error::{SolverError, SolverResult};
use crate::roots::{ScalarDriver, ZeroDriver};
use crate::tol::{self, Options};

/// Solution triple of a reflected backward system.
#[derive(Debug, Clone)]
pub struct ReflectedSolution {
    /// Values and realized increments, exactly as for the unreflected solver.
    pub base: BsdeSolution,
    /// Cumulative reflection `K_k`, nondecreasing in `k`, starting at zero;
    /// `steps + 1` matrices of shape `N x n`.
    pub k_cum: Vec<DMatrix<f64>>,
    /// Penalization level when the solution came from the penalized scheme.
    pub penalty_level: Option<f64>,
}

impl ReflectedSolution {
    pub fn y(&self) -> &[DMatrix<f64>] {
        &self.base.y
    }

    pub fn meta(&self) -> &SolveMeta {
        &self.base.meta
    }

    fn from_parts(base: BsdeSolution, penalty_level: Option<f64>) -> Self {
        let steps = base.steps();
        let modes = base.mode_count();
        let n = base.state_count();
        let mut k_cum = Vec::with_capacity(steps + 1);
        k_cum.push(DMatrix::zeros(modes, n));
        for k in 0..steps {
            let next = &k_cum[k] + &base.dk[k];
            k_cum.push(next);
        }
        ReflectedSolution {
            base,
            k_cum,
            penalty_level,
        }
    }
}

/// Barrier path for a single component: `None` entries mean no obstacle at
/// that step.
pub type BarrierPath = Vec<Option<DVector<f64>>>;

/// Snell envelope of a barrier path: zero driver, pure reflection.
///
/// `Y_k = max(barrier_k, P_dt Y_{k+1})` with `dK_k = (barrier_k - P_dt
/// Y_{k+1})^+`; the smallest supermartingale of the killed chain dominating
/// the obstacle, i.e. the optimal-stopping value.
pub fn snell_envelope(
    gen: &Generator,
    grid: &TimeGrid,
    barrier_path: &BarrierPath,
    terminal: &DVector<f64>,
) -> SolverResult<ReflectedSolution> {
    let kernel = gen.transition_step(grid.dt())?;
    let zero_source = DVector::zeros(gen.state_count());
    let out = scalar_backward(
        &kernel,
        grid,
        terminal,
        &zero_source,
        &Homogeneous(&ZeroDriver),
        StepObstacle::Reflect(barrier_path),
    )?;
    Ok(ReflectedSolution::from_parts(
        pack_scalar(out, grid, &kernel),
        None,
    ))
}

/// First step index at or after `k0` where the envelope touches the barrier,
/// per state; `steps` (the terminal index) when there is no earlier contact.
/// This is the optimal stopping rule of the Snell envelope.
pub fn snell_stopping_rule(
    sol: &ReflectedSolution,
    barrier_path: &BarrierPath,
    k0: usize,
    contact_tol: f64,
) -> Vec<Vec<usize>> {
    let steps = sol.base.steps();
    let n = sol.base.state_count();
    let scale = 1.0 + sol.base.meta.max_abs_y;
    let mut out = vec![vec![steps; n]];
    for x in 0..n {
        for k in k0..steps {
            if let Some(b) = &barrier_path[k] {
                if sol.base.y[k][(0, x)] <= b[x] + contact_tol * scale {
                    out[0][x] = k;
                    break;
                }
            }
        }
    }
    out
}

fn pack_scalar(
    out: crate::bsde::ScalarPassOutput,
    grid: &TimeGrid,
    kernel: &crate::chain::TransitionKernel,
) -> BsdeSolution {
    let n = out.y[0].len();
    let steps = grid.steps();
    let mut max_residual: f64 = 0.0;
    for k in 0..steps {
        let pv = kernel.apply(&out.y[k + 1]);
        for x in 0..n {
            let r = pv[x] + out.inc[k][x] + out.dk[k][x] - out.y[k][x];
            max_residual = max_residual.max(r.abs());
        }
    }
    let max_abs_y = out.y.iter().map(|v| v.amax()).fold(0.0, f64::max);
    BsdeSolution {
        dt: grid.dt(),
        y: out
            .y
            .iter()
            .map(|v| DMatrix::from_fn(1, n, |_, x| v[x]))
            .collect(),
        inc: out
            .inc
            .iter()
            .map(|v| DMatrix::from_fn(1, n, |_, x| v[x]))
            .collect(),
        dk: out
            .dk
            .iter()
            .map(|v| DMatrix::from_fn(1, n, |_, x| v[x]))
            .collect(),
        meta: SolveMeta {
            sweeps: 1,
            final_increment: 0.0,
            max_step_residual: max_residual,
            max_abs_y,
        },
    }
}

/// Single reflected equation with a monotone scalar driver and a fixed
/// barrier path. With no barrier it coincides bitwise with the unreflected
/// solver; with a zero driver it coincides bitwise with the Snell envelope.
pub fn solve_rbsde_scalar<D: ScalarDriver + ?Sized>(
    gen: &Generator,
    grid: &TimeGrid,
    driver: &D,
    source: &DVector<f64>,
    barrier_path: &BarrierPath,
    terminal: &DVector<f64>,
) -> SolverResult<ReflectedSolution> {
    let kernel = gen.transition_step(grid.dt())?;
    let out = scalar_backward(
        &kernel,
        grid,
        terminal,
        source,
        &Homogeneous(driver),
        StepObstacle::Reflect(barrier_path),
    )?;
    Ok(ReflectedSolution::from_parts(
        pack_scalar(out, grid, &kernel),
        None,
    ))
}

/// Minimal solution of the obliquely reflected system by the frozen-barrier
/// outer iteration.
pub fn solve_oblique_iterative(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    env: &Envelope,
    opts: &Options,
) -> SolverResult<ReflectedSolution> {
    let (no_loop, witness) = check_no_loop(bar);
    if !no_loop {
        return Err(SolverError::NoLoopViolation(format!(
            "cycle {:?} closes at state {} near value {}",
            witness
                .as_ref()
                .map(|w| w.cycle.clone())
                .unwrap_or_default(),
            witness.as_ref().map(|w| w.state).unwrap_or_default(),
            witness.map(|w| w.value).unwrap_or_default(),
        )));
    }
    let _ = env;
    let out = system_engine(gen, grid, drv, SystemObstacle::Reflect(bar), opts)?;
    let sol = ReflectedSolution::from_parts(
        BsdeSolution {
            dt: grid.dt(),
            y: out.y,
            inc: out.inc,
            dk: out.dk,
            meta: out.meta,
        },
        None,
    );
    let residual = complementarity_residual(&sol, bar)?;
    let scale = 1.0 + sol.base.meta.max_abs_y;
    if residual > opts.complementarity_tol * scale {
        return Err(SolverError::NoConvergence(format!(
            "complementarity residual {residual} above tolerance at scale {scale}"
        )));
    }
    Ok(sol)
}

/// Penalized approximations at the requested levels, in order. Level zero
/// reproduces the unreflected system solve exactly; the sequence increases
/// in the level and stays below the reflected solution.
pub fn solve_oblique_penalized(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    env: &Envelope,
    penalty_levels: &[f64],
    opts: &Options,
) -> SolverResult<Vec<ReflectedSolution>> {
    let _ = env;
    if penalty_levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SolverError::InvalidGrid(
            "penalty levels must be strictly increasing".into(),
        ));
    }
    if penalty_levels.iter().any(|&l| l < 0.0) {
        return Err(SolverError::InvalidGrid(
            "penalty levels must be nonnegative".into(),
        ));
    }
    let mut out = Vec::with_capacity(penalty_levels.len());
    let mut previous: Option<Vec<DMatrix<f64>>> = None;
    for &level in penalty_levels {
        let run = system_engine(gen, grid, drv, SystemObstacle::Penalize(bar, level), opts)?;
        if let Some(prev) = &previous {
            let scale = 1.0 + run.meta.max_abs_y;
            for k in 0..run.y.len() {
                for j in 0..run.y[k].nrows() {
                    for x in 0..run.y[k].ncols() {
                        if run.y[k][(j, x)] < prev[k][(j, x)] - tol::ORDERING_SLACK * scale {
                            return Err(SolverError::MonotonicityBroken(format!(
                                "penalized value decreased between levels at (k={k}, j={j}, x={x})"
                            )));
                        }
                    }
                }
            }
        }
        previous = Some(run.y.clone());
        out.push(ReflectedSolution::from_parts(
            BsdeSolution {
                dt: grid.dt(),
                y: run.y,
                inc: run.inc,
                dk: run.dk,
                meta: run.meta,
            },
            Some(level),
        ));
    }
    Ok(out)
}

/// Max over `(k, j, x)` of `dK^j_k(x) * (Y^j_k(x) - H^j(x, Y_k(x)))`: the
/// discrete complementarity defect. Modes with empty adjacency contribute
/// nothing (their `K` vanishes identically).
pub fn complementarity_residual(sol: &ReflectedSolution, bar: &BarrierSystem) -> SolverResult<f64> {
    let steps = sol.base.steps();
    let modes = sol.base.mode_count();
    let n = sol.base.state_count();
    if bar.mode_count() != modes || bar.state_count() != n {
        return Err(SolverError::DimensionMismatch(
            "barrier dimensions disagree with the solution".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        for x in 0..n {
            let col: Vec<f64> = (0..modes).map(|j| sol.base.y[k][(j, x)]).collect();
            for j in 0..modes {
                let dk = sol.base.dk[k][(j, x)];
                if dk == 0.0 {
                    continue;
                }
                if let Some(h) = bar.eval_mode(j, x, &col)? {
                    worst = worst.max(dk * (col[j] - h));
                }
            }
        }
    }
    Ok(worst)
}

/// Lowest margin `Y^j_k(x) - H^j(x, Y_k(x))` over the grid; nonnegative up
/// to the contact tolerance for any valid reflected solution.
pub fn domination_margin(sol: &ReflectedSolution, bar: &BarrierSystem) -> SolverResult<f64> {
    let steps = sol.base.steps();
    let modes = sol.base.mode_count();
    let n = sol.base.state_count();
    let mut margin = f64::INFINITY;
    for k in 0..=steps {
        for x in 0..n {
            let col: Vec<f64> = (0..modes).map(|j| sol.base.y[k][(j, x)]).collect();
            for j in 0..modes {
                if let Some(h) = bar.eval_mode(j, x, &col)? {
                    margin = margin.min(col[j] - h);
                }
            }
        }
    }
    Ok(margin)
}
