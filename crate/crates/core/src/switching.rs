//! Switching strategies, exact policy evaluation, the dynamic-programming
//! value and its brute-force oracle, optimal-strategy extraction and Monte
//! Carlo verification.
//!
//! The controller picks a mode process: staying in mode `j` earns the running
//! payoff `psi^j + mu^j`, switching from `j` to `i in A_j` at a grid time
//! costs `c_ji(X)`. For drivers that do not depend on the value vector the
//! switching value solves the mode-augmented dynamic program
//!
//! ```text
//! V^j_k(x) = max( (P_dt V^j_{k+1})(x) + dt (psi^j + mu^j)(x),
//!                 max_{i in A_j} ( -c_ji(x) + V^i_k(x) ) )
//! ```
//!
//! whose within-step fixed point is unique because every switching cycle
//! costs at least the positive floor. The same equations are the fixed point
//! of the obliquely reflected system, which is what the oracle identities in
//! the test suites check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bsde::TimeGrid;
use crate::chain::{mean_stderr, Generator};
use crate::drivers::{check_no_loop, BarrierSystem, DriverKind, DriverSystem};
use crate::error::{SolverError, SolverResult};
use crate::tol;

/// One decision of a feedback policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Stay,
    SwitchTo(usize),
}

/// Markov (feedback) strategy: one action per `(step, state, mode)` for
/// steps `0..K` (no switching at the terminal step).
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    steps: usize,
    states: usize,
    modes: usize,
    actions: Vec<Action>,
}

impl FeedbackPolicy {
    pub fn never_switch(steps: usize, states: usize, modes: usize) -> Self {
        FeedbackPolicy {
            steps,
            states,
            modes,
            actions: vec![Action::Stay; steps * states * modes],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn action(&self, k: usize, x: usize, j: usize) -> Action {
        self.actions[(k * self.states + x) * self.modes + j]
    }

    pub fn set_action(&mut self, k: usize, x: usize, j: usize, a: Action) {
        self.actions[(k * self.states + x) * self.modes + j] = a;
    }

    /// Every switch target must lie in the adjacency set of its mode.
    pub fn validate(&self, bar: &BarrierSystem) -> SolverResult<()> {
        if bar.mode_count() != self.modes || bar.state_count() != self.states {
            return Err(SolverError::DimensionMismatch(
                "policy and barrier dimensions disagree".into(),
            ));
        }
        for k in 0..self.steps {
            for x in 0..self.states {
                for j in 0..self.modes {
                    if let Action::SwitchTo(i) = self.action(k, x, j) {
                        if !bar.adjacency()[j].contains(&i) {
                            return Err(SolverError::InvalidAction(format!(
                                "target {i} not adjacent to mode {j} at (k={k}, x={x})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves the same-step switching chain starting from `j`; returns the
    /// final mode and the visited switch targets, or an error if the chain
    /// cycles.
    fn resolve_chain(&self, k: usize, x: usize, j: usize) -> SolverResult<(usize, Vec<usize>)> {
        let mut mode = j;
        let mut hops = Vec::new();
        loop {
            match self.action(k, x, mode) {
                Action::Stay => return Ok((mode, hops)),
                Action::SwitchTo(i) => {
                    if hops.len() >= self.modes {
                        return Err(SolverError::InvalidAction(format!(
                            "instantaneous switching cycle at (k={k}, x={x}) from mode {j}"
                        )));
                    }
                    hops.push(i);
                    mode = i;
                }
            }
        }
    }
}

/// Realized switching events `(step, target mode)` along one path.
#[derive(Debug, Clone, Default)]
pub struct EventList {
    pub events: Vec<(usize, usize)>,
}

impl EventList {
    /// Nondecreasing switch steps and finitely many switches.
    pub fn is_valid(&self, modes: usize) -> bool {
        self.events.windows(2).all(|w| w[0].0 <= w[1].0)
            && self.events.iter().all(|&(_, m)| m < modes)
    }
}

/// A strategy in either representation.
#[derive(Debug, Clone)]
pub enum Strategy {
    Feedback(FeedbackPolicy),
    Events(EventList),
}

/// Switching value with its optimal feedback policy.
#[derive(Debug, Clone)]
pub struct SwitchingValue {
    /// `steps + 1` matrices of shape `N x n`.
    pub v: Vec<DMatrix<f64>>,
    pub policy: FeedbackPolicy,
    /// Bound on the number of profitable consecutive switches.
    pub switch_count_bound: usize,
}

fn require_decoupled(drv: &DriverSystem) -> SolverResult<()> {
    if drv.kind() != DriverKind::Decoupled {
        return Err(SolverError::NonDecoupledDriver(
            "switching values need a driver independent of y".into(),
        ));
    }
    Ok(())
}

fn require_cost_form(bar: &BarrierSystem) -> SolverResult<()> {
    if !bar.is_cost_form() {
        return Err(SolverError::UnsupportedForm(
            "switching values need cost-form barriers".into(),
        ));
    }
    Ok(())
}

/// Extracts the common terminal vector of a driver system, refusing
/// mode-dependent terminal rewards.
pub fn mode_independent_terminal(drv: &DriverSystem) -> SolverResult<DVector<f64>> {
    let first = drv.xi()[0].clone();
    for j in 1..drv.mode_count() {
        for x in 0..drv.state_count() {
            if drv.xi()[j][x] != first[x] {
                return Err(SolverError::ModeDependentTerminal(format!(
                    "xi differs between modes 0 and {j} at state {x}"
                )));
            }
        }
    }
    Ok(first)
}

/// Within-step switching sweep: Jacobi passes of
/// `V^j <- max(stay^j, max_i (-c_ji + V^i))` until an exact fixed point.
fn mode_sweep(stay: &DMatrix<f64>, bar: &BarrierSystem) -> SolverResult<DMatrix<f64>> {
    let modes = stay.nrows();
    let n = stay.ncols();
    let mut v = stay.clone();
    for _pass in 0..(4 * modes + 8) {
        let mut next = stay.clone();
        let mut changed = false;
        for x in 0..n {
            for j in 0..modes {
                let mut best = stay[(j, x)];
                for &i in &bar.adjacency()[j] {
                    let s = -bar.cost(j, i, x).unwrap() + v[(i, x)];
                    if s > best {
                        best = s;
                    }
                }
                if best != v[(j, x)] {
                    changed = true;
                }
                next[(j, x)] = best;
            }
        }
        v = next;
        if !changed {
            return Ok(v);
        }
    }
    Err(SolverError::NoConvergence(
        "within-step switching sweep did not reach a fixed point".into(),
    ))
}

/// Mode-augmented dynamic programming for the switching value; drivers must
/// be decoupled and barriers cost-form. The running payoff accrues as
/// `dt (psi + mu)(X_k)` per step, matching the implicit backward solvers.
pub fn value_via_dp(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
) -> SolverResult<SwitchingValue> {
    value_dp_with_accrual(gen, grid, drv, bar, terminal, StepAccrual::Rectangle)
}

/// Dynamic program with the within-step payoff integrated exactly through
/// the occupation kernel. At long horizons this reproduces stationary values
/// without the rectangle accrual bias (on single-state contact sets the
/// identity is exact; otherwise it holds to second order in `dt`).
pub fn value_via_dp_integrated(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
) -> SolverResult<SwitchingValue> {
    value_dp_with_accrual(gen, grid, drv, bar, terminal, StepAccrual::Integrated)
}

fn value_dp_with_accrual(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
    accrual: StepAccrual,
) -> SolverResult<SwitchingValue> {
    require_decoupled(drv)?;
    require_cost_form(bar)?;
    let (no_loop, _) = check_no_loop(bar);
    if !no_loop {
        return Err(SolverError::NoLoopViolation(
            "switching graph admits a nonpositive-cost cycle".into(),
        ));
    }
    let n = gen.state_count();
    let modes = drv.mode_count();
    if terminal.len() != n || drv.state_count() != n || bar.state_count() != n {
        return Err(SolverError::DimensionMismatch(
            "dimensions disagree in value_via_dp".into(),
        ));
    }
    let kernel = gen.transition_step(grid.dt())?;
    let dt = grid.dt();
    let steps = grid.steps();
    let accrued: Vec<DVector<f64>> = match accrual {
        StepAccrual::Rectangle => Vec::new(),
        StepAccrual::Integrated => {
            let r = gen.occupation_step(dt)?;
            (0..modes)
                .map(|j| &r * (drv.psi()[j].clone() + drv.mu()[j].values()))
                .collect()
        }
    };

    let mut v = vec![DMatrix::zeros(modes, n); steps + 1];
    v[steps] = DMatrix::from_fn(modes, n, |_, x| terminal[x]);
    for k in (0..steps).rev() {
        let mut stay = DMatrix::zeros(modes, n);
        for j in 0..modes {
            let row = DVector::from_fn(n, |x, _| v[k + 1][(j, x)]);
            let pv = kernel.apply(&row);
            for x in 0..n {
                stay[(j, x)] = match accrual {
                    // Same grouping as the implicit backward step: the source
                    // joins the kernel value first, then the driver.
                    StepAccrual::Rectangle => {
                        (pv[x] + dt * drv.mu()[j].values()[x]) + dt * drv.psi()[j][x]
                    }
                    StepAccrual::Integrated => pv[x] + accrued[j][x],
                };
            }
        }
        v[k] = mode_sweep(&stay, bar)?;
    }

    let policy = extract_policy_from_values(&v, bar, tol::CONTACT_TOL);
    let vmax = v.iter().map(|m| m.max()).fold(f64::NEG_INFINITY, f64::max);
    let vmin = v.iter().map(|m| m.min()).fold(f64::INFINITY, f64::min);
    let bound = ((vmax - vmin) / bar.cost_floor()).ceil() as usize + 1;
    Ok(SwitchingValue {
        v,
        policy,
        switch_count_bound: bound,
    })
}

fn extract_policy_from_values(
    v: &[DMatrix<f64>],
    bar: &BarrierSystem,
    contact_tol: f64,
) -> FeedbackPolicy {
    let steps = v.len() - 1;
    let modes = v[0].nrows();
    let n = v[0].ncols();
    let scale = 1.0 + v.iter().map(|m| m.amax()).fold(0.0, f64::max);
    let mut pol = FeedbackPolicy::never_switch(steps, n, modes);
    for (k, vk) in v.iter().enumerate().take(steps) {
        for x in 0..n {
            for j in 0..modes {
                if bar.adjacency()[j].is_empty() {
                    continue;
                }
                // Smallest index attaining the barrier maximum; strict
                // comparison keeps the first argmax.
                let mut best_i = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for &i in &bar.adjacency()[j] {
                    let s = -bar.cost(j, i, x).unwrap() + vk[(i, x)];
                    if s > best {
                        best = s;
                        best_i = i;
                    }
                }
                if vk[(j, x)] <= best + contact_tol * scale {
                    pol.set_action(k, x, j, Action::SwitchTo(best_i));
                }
            }
        }
    }
    pol
}

/// Feedback form of the optimal strategy: switch exactly on the contact set
/// of the value, to the smallest mode attaining the obstacle maximum.
pub fn extract_optimal_strategy(val: &SwitchingValue, bar: &BarrierSystem) -> FeedbackPolicy {
    extract_policy_from_values(&val.v, bar, tol::CONTACT_TOL)
}

/// How the running payoff accrues over one grid step during policy
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepAccrual {
    /// `dt (psi + mu)(X_k)`: matches the implicit backward solvers and the
    /// dynamic program.
    Rectangle,
    /// `(R_dt (psi + mu))(X_k)` with the integrated kernel
    /// `R_dt = integral of exp(sL)`: the exact expectation of a path
    /// integral over one step, i.e. the target of the Monte Carlo estimator.
    Integrated,
}

/// Exact expected payoff of a feedback policy per starting `(step, mode,
/// state)`: a backward linear recursion under the fixed policy, with costs
/// charged at switch events. Same-step switching chains are resolved
/// through the policy; an instantaneous cycle yields value minus infinity
/// for the modes feeding it.
pub fn evaluate_feedback_policy(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
    pol: &FeedbackPolicy,
) -> SolverResult<Vec<DMatrix<f64>>> {
    evaluate_policy_with_accrual(gen, grid, drv, bar, terminal, pol, StepAccrual::Rectangle)
}

/// Unbiased target of [`simulate_strategy`]: the policy value with the
/// within-step payoff integrated exactly, so the Monte Carlo mean differs
/// from it by sampling noise alone at any step size.
pub fn simulation_target_value(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
    pol: &FeedbackPolicy,
) -> SolverResult<Vec<DMatrix<f64>>> {
    evaluate_policy_with_accrual(gen, grid, drv, bar, terminal, pol, StepAccrual::Integrated)
}

fn evaluate_policy_with_accrual(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
    pol: &FeedbackPolicy,
    accrual: StepAccrual,
) -> SolverResult<Vec<DMatrix<f64>>> {
    require_decoupled(drv)?;
    require_cost_form(bar)?;
    pol.validate(bar)?;
    let n = gen.state_count();
    let modes = drv.mode_count();
    if pol.steps != grid.steps() || pol.states != n || pol.modes != modes {
        return Err(SolverError::GridMismatch(
            "policy shape does not match grid and instance".into(),
        ));
    }
    let kernel = gen.transition_step(grid.dt())?;
    let dt = grid.dt();
    let steps = grid.steps();
    // Per-mode exactly-integrated running payoff over one step; only the
    // integrated accrual needs it.
    let accrued: Vec<DVector<f64>> = match accrual {
        StepAccrual::Rectangle => Vec::new(),
        StepAccrual::Integrated => {
            let r = gen.occupation_step(dt)?;
            (0..modes)
                .map(|j| &r * (drv.psi()[j].clone() + drv.mu()[j].values()))
                .collect()
        }
    };
    let mut j_val = vec![DMatrix::zeros(modes, n); steps + 1];
    j_val[steps] = DMatrix::from_fn(modes, n, |_, x| terminal[x]);
    for k in (0..steps).rev() {
        let mut stay = DMatrix::zeros(modes, n);
        for j in 0..modes {
            let row = DVector::from_fn(n, |x, _| j_val[k + 1][(j, x)]);
            let finite = row.iter().all(|v| v.is_finite());
            if finite {
                let pv = kernel.apply(&row);
                for x in 0..n {
                    stay[(j, x)] = match accrual {
                        StepAccrual::Rectangle => {
                            (pv[x] + dt * drv.mu()[j].values()[x]) + dt * drv.psi()[j][x]
                        }
                        StepAccrual::Integrated => pv[x] + accrued[j][x],
                    };
                }
            } else {
                // Minus-infinity continuation values poison exactly the
                // states that can reach them.
                for x in 0..n {
                    let mut acc = 0.0;
                    let mut poisoned = false;
                    for xp in 0..n {
                        let p = kernel.matrix[(x, xp)];
                        if p > 0.0 && !row[xp].is_finite() {
                            poisoned = true;
                            break;
                        }
                        acc += p * row[xp];
                    }
                    stay[(j, x)] = if poisoned {
                        f64::NEG_INFINITY
                    } else {
                        match accrual {
                            StepAccrual::Rectangle => {
                                (acc + dt * drv.mu()[j].values()[x]) + dt * drv.psi()[j][x]
                            }
                            StepAccrual::Integrated => acc + accrued[j][x],
                        }
                    };
                }
            }
        }
        for x in 0..n {
            for j in 0..modes {
                match pol.resolve_chain(k, x, j) {
                    Ok((final_mode, hops)) => {
                        let mut cost = 0.0;
                        let mut from = j;
                        for &i in &hops {
                            cost += bar.cost(from, i, x).ok_or_else(|| {
                                SolverError::InvalidAction(format!(
                                    "target {i} not adjacent to {from}"
                                ))
                            })?;
                            from = i;
                        }
                        j_val[k][(j, x)] = stay[(final_mode, x)] - cost;
                    }
                    // A same-step cycle pays the positive floor forever.
                    Err(_) => j_val[k][(j, x)] = f64::NEG_INFINITY,
                }
            }
        }
    }
    Ok(j_val)
}

/// Exhaustive enumeration of feedback policies: evaluates every policy
/// exactly and returns the pointwise maximum together with the first
/// enumerated policy (stay-first ordering) attaining the maximum everywhere.
pub fn brute_force_value(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
    enumeration_cap: u64,
) -> SolverResult<SwitchingValue> {
    require_decoupled(drv)?;
    require_cost_form(bar)?;
    let n = gen.state_count();
    let modes = drv.mode_count();
    let steps = grid.steps();

    // Per-slot action lists, stay first.
    let slot_actions: Vec<Vec<Action>> = (0..modes)
        .map(|j| {
            let mut acts = vec![Action::Stay];
            acts.extend(bar.adjacency()[j].iter().map(|&i| Action::SwitchTo(i)));
            acts
        })
        .collect();
    let slots = steps * n * modes;
    let mut total: f64 = 1.0;
    for k in 0..steps {
        let _ = k;
        for _x in 0..n {
            for j in 0..modes {
                total *= slot_actions[j].len() as f64;
            }
        }
    }
    if total > enumeration_cap as f64 || total.is_nan() {
        return Err(SolverError::CapExceeded(format!(
            "{total:.3e} policies exceed the cap {enumeration_cap}"
        )));
    }

    let policy_of = |odometer: &[usize]| -> FeedbackPolicy {
        let mut pol = FeedbackPolicy::never_switch(steps, n, modes);
        for k in 0..steps {
            for x in 0..n {
                for j in 0..modes {
                    let slot = (k * n + x) * modes + j;
                    pol.set_action(k, x, j, slot_actions[j][odometer[slot]]);
                }
            }
        }
        pol
    };
    let advance = |odometer: &mut [usize]| -> bool {
        for slot in 0..slots {
            let j = slot % modes;
            odometer[slot] += 1;
            if odometer[slot] < slot_actions[j].len() {
                return true;
            }
            odometer[slot] = 0;
        }
        false
    };

    // Pass 1: pointwise maximum.
    let mut vmax = vec![DMatrix::from_element(modes, n, f64::NEG_INFINITY); steps + 1];
    let mut odometer = vec![0usize; slots];
    loop {
        let pol = policy_of(&odometer);
        let j_val = evaluate_feedback_policy(gen, grid, drv, bar, terminal, &pol)?;
        for k in 0..=steps {
            for j in 0..modes {
                for x in 0..n {
                    if j_val[k][(j, x)] > vmax[k][(j, x)] {
                        vmax[k][(j, x)] = j_val[k][(j, x)];
                    }
                }
            }
        }
        if !advance(&mut odometer) {
            break;
        }
    }

    // Pass 2: first policy attaining the maximum everywhere.
    let mut odometer = vec![0usize; slots];
    let mut argmax = None;
    loop {
        let pol = policy_of(&odometer);
        let j_val = evaluate_feedback_policy(gen, grid, drv, bar, terminal, &pol)?;
        let attains = (0..=steps).all(|k| {
            (0..modes).all(|j| (0..n).all(|x| j_val[k][(j, x)] >= vmax[k][(j, x)] - 1e-12))
        });
        if attains {
            argmax = Some(pol);
            break;
        }
        if !advance(&mut odometer) {
            break;
        }
    }
    let policy = argmax.ok_or_else(|| {
        SolverError::NoConvergence("no single policy attains the pointwise maximum".into())
    })?;
    let hi = vmax
        .iter()
        .map(|m| m.max())
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = vmax.iter().map(|m| m.min()).fold(f64::INFINITY, f64::min);
    Ok(SwitchingValue {
        v: vmax,
        policy,
        switch_count_bound: ((hi - lo) / bar.cost_floor()).ceil() as usize + 1,
    })
}

/// Monte Carlo estimate of a policy's payoff from `(x0, start_mode)`.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub paths: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Largest number of switch events observed on a single path.
    pub max_switches: usize,
}

/// Simulates exact chain paths, applies the feedback policy at grid times
/// (running payoffs integrate exactly along the path between grid times) and
/// aggregates deterministically in seed order.
#[allow(clippy::too_many_arguments)]
pub fn simulate_strategy(
    gen: &Generator,
    grid: &TimeGrid,
    drv: &DriverSystem,
    bar: &BarrierSystem,
    terminal: &DVector<f64>,
    pol: &FeedbackPolicy,
    x0: usize,
    start_mode: usize,
    paths: usize,
    seed: u64,
) -> SolverResult<SimulationReport> {
    require_decoupled(drv)?;
    require_cost_form(bar)?;
    pol.validate(bar)?;
    if paths == 0 {
        return Err(SolverError::InvalidGrid("paths must be positive".into()));
    }
    if start_mode >= drv.mode_count() || x0 >= gen.state_count() {
        return Err(SolverError::DimensionMismatch(
            "start state or mode out of range".into(),
        ));
    }
    let horizon = grid.horizon();
    let dt = grid.dt();
    let steps = grid.steps();
    let modes = drv.mode_count();

    let results: SolverResult<Vec<(f64, usize)>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let path = gen.sample_path(x0, seed.wrapping_add(i as u64), horizon)?;
            let segments = path.segments();
            let mut mode = start_mode;
            let mut value = 0.0;
            let mut switches = 0usize;
            for k in 0..steps {
                let t0 = k as f64 * dt;
                let t1 = (k + 1) as f64 * dt;
                if t0 >= path.killed_at {
                    break;
                }
                let xk = path
                    .state_at(t0)
                    .expect("alive strictly before the lifetime");
                // Apply the same-step switching chain.
                let mut hops = 0usize;
                loop {
                    match pol.action(k, xk, mode) {
                        Action::Stay => break,
                        Action::SwitchTo(i) => {
                            value -= bar.cost(mode, i, xk).ok_or_else(|| {
                                SolverError::InvalidAction(format!(
                                    "target {i} not adjacent to {mode}"
                                ))
                            })?;
                            mode = i;
                            switches += 1;
                            hops += 1;
                            if hops > modes {
                                return Err(SolverError::InvalidAction(format!(
                                    "instantaneous switching cycle at step {k}, state {xk}"
                                )));
                            }
                        }
                    }
                }
                // Exact running integral of psi + mu over [t0, t1 & lifetime).
                let g_psi = &drv.psi()[mode];
                let g_mu = drv.mu()[mode].values();
                for &(s, a, b) in &segments {
                    let lo = a.max(t0);
                    let hi = b.min(t1);
                    if hi > lo {
                        value += (g_psi[s] + g_mu[s]) * (hi - lo);
                    }
                }
            }
            if path.capped {
                let last = *path.states.last().unwrap();
                value += terminal[last];
            }
            Ok((value, switches))
        })
        .collect();
    let results = results?;
    let values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let max_switches = results.iter().map(|r| r.1).max().unwrap_or(0);
    let (mean, stderr) = mean_stderr(&values);
    Ok(SimulationReport {
        paths,
        mean,
        stderr,
        max_switches,
    })
}

/// Replays a feedback policy along one sampled path, returning the realized
/// event list. Useful for exporting explicit strategies.
pub fn realize_events(
    gen: &Generator,
    grid: &TimeGrid,
    bar: &BarrierSystem,
    pol: &FeedbackPolicy,
    x0: usize,
    start_mode: usize,
    seed: u64,
) -> SolverResult<EventList> {
    pol.validate(bar)?;
    let path = gen.sample_path(x0, seed, grid.horizon())?;
    let mut mode = start_mode;
    let mut events = Vec::new();
    for k in 0..grid.steps() {
        let t0 = k as f64 * grid.dt();
        if t0 >= path.killed_at {
            break;
        }
        let xk = path.state_at(t0).expect("alive before lifetime");
        let mut hops = 0usize;
        while let Action::SwitchTo(i) = pol.action(k, xk, mode) {
            events.push((k, i));
            mode = i;
            hops += 1;
            if hops > pol.modes {
                return Err(SolverError::InvalidAction(
                    "instantaneous switching cycle".into(),
                ));
            }
        }
    }
    Ok(EventList { events })
}
