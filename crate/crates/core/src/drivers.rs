//! Quasi-monotone driver systems, oblique obstacle systems and
//! sub/supersolution envelopes.
//!
//! A driver system is a map `f = (f^1, ..., f^N)` on states and mode vectors
//! that is *quasi-monotone*: nonincreasing in the own component `y^j` and
//! nondecreasing in every other component. Three parametric families are
//! provided whose structure guarantees quasi-monotonicity by construction:
//!
//! - decoupled: `f^j(x, y) = psi^j(x)`;
//! - affine: `f^j(x, y) = psi^j(x) + sum_i G_ji(x) y^i` with `G_ji >= 0`
//!   off-diagonal, `G_jj <= 0`, and nonpositive row sums (the row-sum
//!   condition is what makes the replicated envelope construction below
//!   valid);
//! - smooth-coupled: `f^j(x, y) = psi^j(x) - lambda_j y^j +
//!   sum_{i != j} alpha_ji tanh(y^i)` with `lambda_j, alpha_ji >= 0`.
//!
//! An obstacle system couples modes through
//! `H^j(x, y) = max over i in A_j of h_ji(x, y^i)`, with the convention that
//! the maximum over an empty adjacency set is minus infinity — represented as
//! `None`, never as a float, so no arithmetic can touch the sentinel. The
//! cost form is `h_ji(x, a) = -c_ji(x) + a` with costs bounded below by a
//! positive floor; the general form replaces `a` by `min(a, cap)`, which
//! stays nondecreasing, 1-Lipschitz and dominated by `a`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::chain::{Generator, MeasureDensity};
use crate::error::{SolverError, SolverResult};
use crate::roots::{elliptic_scalar_solve, ScalarDriver};

/// Mode-coupling part of a driver system.
#[derive(Debug, Clone)]
pub enum Coupling {
    Decoupled,
    /// One `N x N` matrix per state; entry `(j, i)` multiplies `y^i` in `f^j`.
    Affine {
        g: Vec<DMatrix<f64>>,
    },
    /// `f^j = psi^j - lambda_j y^j + sum_{i != j} alpha_ji tanh(y^i)`.
    SmoothCoupled {
        lambda: Vec<f64>,
        alpha: DMatrix<f64>,
    },
}

/// Which family a driver belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    Decoupled,
    Affine,
    SmoothCoupled,
}

/// A quasi-monotone driver system together with its sources and terminal data.
#[derive(Debug, Clone)]
pub struct DriverSystem {
    modes: usize,
    states: usize,
    psi: Vec<DVector<f64>>,
    coupling: Coupling,
    mu: Vec<MeasureDensity>,
    xi: Vec<DVector<f64>>,
    /// Largest off-diagonal coupling row sum; bounds how far one sweep of the
    /// frozen-argument iteration can move per unit time.
    coupling_lipschitz: f64,
    /// Largest own-variable slope magnitude.
    own_lipschitz: f64,
}

impl DriverSystem {
    pub fn new(
        psi: Vec<DVector<f64>>,
        coupling: Coupling,
        mu: Vec<MeasureDensity>,
        xi: Vec<DVector<f64>>,
    ) -> SolverResult<Self> {
        let drv = Self::assemble(psi, coupling, mu, xi)?;
        drv.validate_structure()?;
        Ok(drv)
    }

    /// Bypasses the structural checks; only for injecting deliberately broken
    /// parameters into the quasi-monotonicity validator.
    #[doc(hidden)]
    pub fn new_unchecked(
        psi: Vec<DVector<f64>>,
        coupling: Coupling,
        mu: Vec<MeasureDensity>,
        xi: Vec<DVector<f64>>,
    ) -> SolverResult<Self> {
        Self::assemble(psi, coupling, mu, xi)
    }

    fn assemble(
        psi: Vec<DVector<f64>>,
        coupling: Coupling,
        mu: Vec<MeasureDensity>,
        xi: Vec<DVector<f64>>,
    ) -> SolverResult<Self> {
        let modes = psi.len();
        if modes == 0 {
            return Err(SolverError::DimensionMismatch("no modes".into()));
        }
        let states = psi[0].len();
        if states == 0 {
            return Err(SolverError::DimensionMismatch("no states".into()));
        }
        if psi.iter().any(|p| p.len() != states) {
            return Err(SolverError::DimensionMismatch(
                "psi rows have unequal lengths".into(),
            ));
        }
        if mu.len() != modes || mu.iter().any(|m| m.len() != states) {
            return Err(SolverError::DimensionMismatch(
                "mu must have one density of full state dimension per mode".into(),
            ));
        }
        if xi.len() != modes || xi.iter().any(|m| m.len() != states) {
            return Err(SolverError::DimensionMismatch(
                "xi must have one vector of full state dimension per mode".into(),
            ));
        }
        let (coupling_lipschitz, own_lipschitz) = match &coupling {
            Coupling::Decoupled => (0.0, 0.0),
            Coupling::Affine { g } => {
                if g.len() != states || g.iter().any(|m| m.nrows() != modes || m.ncols() != modes) {
                    return Err(SolverError::DimensionMismatch(
                        "affine coupling needs one N x N matrix per state".into(),
                    ));
                }
                let mut off: f64 = 0.0;
                let mut own: f64 = 0.0;
                for m in g {
                    for j in 0..modes {
                        let mut row_off = 0.0;
                        for i in 0..modes {
                            if i != j {
                                row_off += m[(j, i)].max(0.0);
                            }
                        }
                        off = off.max(row_off);
                        own = own.max(m[(j, j)].abs());
                    }
                }
                (off, own)
            }
            Coupling::SmoothCoupled { lambda, alpha } => {
                if lambda.len() != modes || alpha.nrows() != modes || alpha.ncols() != modes {
                    return Err(SolverError::DimensionMismatch(
                        "smooth coupling needs lambda of length N and N x N alpha".into(),
                    ));
                }
                let mut off: f64 = 0.0;
                let mut own: f64 = 0.0;
                for j in 0..modes {
                    let row: f64 = (0..modes)
                        .filter(|&i| i != j)
                        .map(|i| alpha[(j, i)].max(0.0))
                        .sum();
                    off = off.max(row);
                    own = own.max(lambda[j].abs());
                }
                (off, own)
            }
        };
        Ok(DriverSystem {
            modes,
            states,
            psi,
            coupling,
            mu,
            xi,
            coupling_lipschitz,
            own_lipschitz,
        })
    }

    fn validate_structure(&self) -> SolverResult<()> {
        match &self.coupling {
            Coupling::Decoupled => {}
            Coupling::Affine { g } => {
                for (x, m) in g.iter().enumerate() {
                    for j in 0..self.modes {
                        if m[(j, j)] > 0.0 {
                            return Err(SolverError::InvalidRates(format!(
                                "affine coupling diagonal G[{j},{j}] = {} > 0 at state {x}",
                                m[(j, j)]
                            )));
                        }
                        let mut row_sum = m[(j, j)];
                        for i in 0..self.modes {
                            if i == j {
                                continue;
                            }
                            if m[(j, i)] < 0.0 {
                                return Err(SolverError::InvalidRates(format!(
                                    "affine coupling off-diagonal G[{j},{i}] = {} < 0 at state {x}",
                                    m[(j, i)]
                                )));
                            }
                            row_sum += m[(j, i)];
                        }
                        if row_sum > 1e-12 {
                            return Err(SolverError::InvalidRates(format!(
                                "affine coupling row {j} at state {x} has positive sum {row_sum}; \
                                 envelopes require nonpositive coupling row sums"
                            )));
                        }
                    }
                }
            }
            Coupling::SmoothCoupled { lambda, alpha } => {
                if lambda.iter().any(|&l| l < 0.0) {
                    return Err(SolverError::InvalidRates(
                        "smooth coupling needs lambda >= 0".into(),
                    ));
                }
                for j in 0..self.modes {
                    for i in 0..self.modes {
                        if i == j && alpha[(j, j)] != 0.0 {
                            return Err(SolverError::InvalidRates(
                                "smooth coupling alpha must vanish on the diagonal".into(),
                            ));
                        }
                        if alpha[(j, i)] < 0.0 {
                            return Err(SolverError::InvalidRates(
                                "smooth coupling needs alpha >= 0".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn mode_count(&self) -> usize {
        self.modes
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn kind(&self) -> DriverKind {
        match self.coupling {
            Coupling::Decoupled => DriverKind::Decoupled,
            Coupling::Affine { .. } => DriverKind::Affine,
            Coupling::SmoothCoupled { .. } => DriverKind::SmoothCoupled,
        }
    }

    pub fn psi(&self) -> &[DVector<f64>] {
        &self.psi
    }

    pub fn mu(&self) -> &[MeasureDensity] {
        &self.mu
    }

    pub fn xi(&self) -> &[DVector<f64>] {
        &self.xi
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn coupling_lipschitz(&self) -> f64 {
        self.coupling_lipschitz
    }

    pub fn own_lipschitz(&self) -> f64 {
        self.own_lipschitz
    }

    /// Same driver with the terminal data replaced; used by finite-horizon
    /// truncations of stationary problems.
    pub fn with_terminal(&self, xi: Vec<DVector<f64>>) -> SolverResult<Self> {
        Self::assemble(self.psi.clone(), self.coupling.clone(), self.mu.clone(), xi)
    }

    /// `f(x, y)` for the full mode vector `y`.
    pub fn eval(&self, x: usize, y: &[f64]) -> SolverResult<DVector<f64>> {
        if x >= self.states {
            return Err(SolverError::DimensionMismatch(format!(
                "state {x} of {}",
                self.states
            )));
        }
        if y.len() != self.modes {
            return Err(SolverError::DimensionMismatch(format!(
                "mode vector length {} of {}",
                y.len(),
                self.modes
            )));
        }
        let mut out = DVector::zeros(self.modes);
        for j in 0..self.modes {
            out[j] = self.eval_frozen(j, x, y, y[j]);
        }
        Ok(out)
    }

    /// `f^j(x, y; a)`: component `j` with the off-diagonal entries frozen at
    /// `y` and the own entry replaced by `a`. Entry `y[j]` is ignored.
    pub fn eval_frozen(&self, j: usize, x: usize, y: &[f64], a: f64) -> f64 {
        match &self.coupling {
            Coupling::Decoupled => self.psi[j][x],
            Coupling::Affine { g } => {
                let m = &g[x];
                let mut acc = self.psi[j][x] + m[(j, j)] * a;
                for i in 0..self.modes {
                    if i != j {
                        acc += m[(j, i)] * y[i];
                    }
                }
                acc
            }
            Coupling::SmoothCoupled { lambda, alpha } => {
                let mut acc = self.psi[j][x] - lambda[j] * a;
                for i in 0..self.modes {
                    if i != j {
                        acc += alpha[(j, i)] * y[i].tanh();
                    }
                }
                acc
            }
        }
    }

    /// Own-variable slope of `f^j(x, ...; a)`; constant in the frozen entries
    /// for all three families.
    pub fn own_slope(&self, j: usize, x: usize, _a: f64) -> f64 {
        match &self.coupling {
            Coupling::Decoupled => 0.0,
            Coupling::Affine { g } => g[x][(j, j)],
            Coupling::SmoothCoupled { lambda, .. } => -lambda[j],
        }
    }

    /// Value and slope of `f^j(x, a*1; a) + mu^j(x)` — the driver evaluated on
    /// the diagonal of mode space; the envelope recursions are built from
    /// mode-wise minima and maxima of these rows.
    fn diagonal_row(&self, j: usize, x: usize, a: f64) -> (f64, f64) {
        match &self.coupling {
            Coupling::Decoupled => (self.psi[j][x] + self.mu[j].values()[x], 0.0),
            Coupling::Affine { g } => {
                let s: f64 = (0..self.modes).map(|i| g[x][(j, i)]).sum();
                (self.psi[j][x] + self.mu[j].values()[x] + s * a, s)
            }
            Coupling::SmoothCoupled { lambda, alpha } => {
                let t = a.tanh();
                let off: f64 = (0..self.modes)
                    .filter(|&i| i != j)
                    .map(|i| alpha[(j, i)])
                    .sum();
                (
                    self.psi[j][x] + self.mu[j].values()[x] - lambda[j] * a + off * t,
                    -lambda[j] + off * (1.0 - t * t),
                )
            }
        }
    }

    /// Source bound `b^j(x)` with `f^j(x, w*1; w) + mu^j(x) <= b^j(x)` for
    /// every `w >= 0`; the replicated upper envelope is the resolvent of
    /// `sum_j (b^j)^+`.
    pub(crate) fn upper_source_bound(&self, j: usize, x: usize) -> f64 {
        let base = self.psi[j][x] + self.mu[j].values()[x];
        match &self.coupling {
            Coupling::Decoupled => base,
            // Nonpositive row sums: coupling only lowers the row for w >= 0.
            Coupling::Affine { .. } => base,
            Coupling::SmoothCoupled { alpha, .. } => {
                let off: f64 = (0..self.modes)
                    .filter(|&i| i != j)
                    .map(|i| alpha[(j, i)])
                    .sum();
                base + off
            }
        }
    }
}

/// Scalar envelope driver `min_j [ f^j(x, a*1; a) + mu^j(x) ]`; nonincreasing
/// in `a` for all three families.
pub(crate) struct EnvelopeLowerFn<'a>(pub &'a DriverSystem);

impl ScalarDriver for EnvelopeLowerFn<'_> {
    fn value(&self, x: usize, a: f64) -> f64 {
        (0..self.0.modes)
            .map(|j| self.0.diagonal_row(j, x, a).0)
            .fold(f64::INFINITY, f64::min)
    }
    fn slope(&self, x: usize, a: f64) -> f64 {
        let (mut best, mut slope) = self.0.diagonal_row(0, x, a);
        for j in 1..self.0.modes {
            let (v, s) = self.0.diagonal_row(j, x, a);
            if v < best {
                best = v;
                slope = s;
            }
        }
        slope
    }
}

/// Scalar envelope driver `max_j [ f^j(x, a*1; a) + mu^j(x) ]`.
pub(crate) struct EnvelopeUpperFn<'a>(pub &'a DriverSystem);

impl ScalarDriver for EnvelopeUpperFn<'_> {
    fn value(&self, x: usize, a: f64) -> f64 {
        (0..self.0.modes)
            .map(|j| self.0.diagonal_row(j, x, a).0)
            .fold(f64::NEG_INFINITY, f64::max)
    }
    fn slope(&self, x: usize, a: f64) -> f64 {
        let (mut best, mut slope) = self.0.diagonal_row(0, x, a);
        for j in 1..self.0.modes {
            let (v, s) = self.0.diagonal_row(j, x, a);
            if v > best {
                best = v;
                slope = s;
            }
        }
        slope
    }
}

/// One sampled monotonicity violation.
#[derive(Debug, Clone)]
pub struct MonotonicityViolation {
    pub mode: usize,
    pub state: usize,
    pub on_diagonal: bool,
    pub gap: f64,
}

/// Result of sampling the quasi-monotonicity inequalities.
#[derive(Debug, Clone)]
pub struct QuasiMonotoneReport {
    pub samples: usize,
    pub violation_count: usize,
    /// At most the first 32 violations, for diagnostics.
    pub violations: Vec<MonotonicityViolation>,
}

impl QuasiMonotoneReport {
    pub fn is_clean(&self) -> bool {
        self.violation_count == 0
    }
}

/// Draws seeded `(x, y, y')` samples with the orderings required by
/// quasi-monotonicity and reports every violated inequality. Violations are
/// report content, not errors.
pub fn validate_quasi_monotone(
    drv: &DriverSystem,
    sample_budget: usize,
    seed: u64,
) -> QuasiMonotoneReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = 5.0 + drv.psi.iter().map(|p| p.amax()).fold(0.0, f64::max);
    let mut violations = Vec::new();
    let mut count = 0usize;
    let n = drv.state_count();
    let modes = drv.mode_count();
    for _ in 0..sample_budget.max(1) {
        let x = rng.random_range(0..n);
        let j = rng.random_range(0..modes);
        let y: Vec<f64> = (0..modes)
            .map(|_| rng.random_range(-scale..scale))
            .collect();

        // On-diagonal: a >= a' must give f^j(x, y; a) <= f^j(x, y; a').
        let a1 = rng.random_range(-scale..scale);
        let a2 = a1 + rng.random_range(0.0..scale);
        let hi = drv.eval_frozen(j, x, &y, a2);
        let lo = drv.eval_frozen(j, x, &y, a1);
        if hi > lo + 1e-12 {
            count += 1;
            if violations.len() < 32 {
                violations.push(MonotonicityViolation {
                    mode: j,
                    state: x,
                    on_diagonal: true,
                    gap: hi - lo,
                });
            }
        }

        // Off-diagonal: raising the other components must not lower f^j.
        let mut y_hi = y.clone();
        for (i, v) in y_hi.iter_mut().enumerate() {
            if i != j {
                *v += rng.random_range(0.0..scale);
            }
        }
        let own = y[j];
        let before = drv.eval_frozen(j, x, &y, own);
        let after = drv.eval_frozen(j, x, &y_hi, own);
        if after < before - 1e-12 {
            count += 1;
            if violations.len() < 32 {
                violations.push(MonotonicityViolation {
                    mode: j,
                    state: x,
                    on_diagonal: false,
                    gap: before - after,
                });
            }
        }
    }
    QuasiMonotoneReport {
        samples: sample_budget.max(1),
        violation_count: count,
        violations,
    }
}

/// Shape of the pairwise obstacles `h_ji`.
#[derive(Debug, Clone)]
pub enum BarrierForm {
    /// `h_ji(x, a) = -c_ji(x) + a`.
    CostForm,
    /// `h_ji(x, a) = -c_ji(x) + min(a, cap)`.
    General { cap: f64 },
}

/// Oblique obstacle system `H^j(x, y) = max_{i in A_j} h_ji(x, y^i)`.
#[derive(Debug, Clone)]
pub struct BarrierSystem {
    modes: usize,
    states: usize,
    adjacency: Vec<Vec<usize>>,
    /// `costs[j][k]` is the cost vector for the edge `j -> adjacency[j][k]`.
    costs: Vec<Vec<DVector<f64>>>,
    form: BarrierForm,
    cost_floor: f64,
}

impl BarrierSystem {
    pub fn new(
        states: usize,
        adjacency: Vec<Vec<usize>>,
        costs: Vec<Vec<DVector<f64>>>,
        form: BarrierForm,
        cost_floor: f64,
    ) -> SolverResult<Self> {
        let modes = adjacency.len();
        if modes == 0 || states == 0 {
            return Err(SolverError::DimensionMismatch(
                "barrier needs at least one mode and one state".into(),
            ));
        }
        if costs.len() != modes {
            return Err(SolverError::DimensionMismatch(
                "one cost list per mode required".into(),
            ));
        }
        match form {
            BarrierForm::CostForm => {
                if cost_floor <= 0.0 || cost_floor.is_nan() {
                    return Err(SolverError::InvalidRates(format!(
                        "cost form requires a strictly positive cost floor, got {cost_floor}"
                    )));
                }
            }
            BarrierForm::General { cap } => {
                if !cap.is_finite() {
                    return Err(SolverError::InvalidRates(
                        "general form cap must be finite".into(),
                    ));
                }
                if cost_floor < 0.0 {
                    return Err(SolverError::InvalidRates(
                        "cost floor must be nonnegative".into(),
                    ));
                }
            }
        }
        for (j, adj) in adjacency.iter().enumerate() {
            if costs[j].len() != adj.len() {
                return Err(SolverError::DimensionMismatch(format!(
                    "mode {j}: {} targets but {} cost vectors",
                    adj.len(),
                    costs[j].len()
                )));
            }
            let mut seen = vec![false; modes];
            for (k, &i) in adj.iter().enumerate() {
                if i >= modes || i == j {
                    return Err(SolverError::DimensionMismatch(format!(
                        "mode {j}: invalid switch target {i}"
                    )));
                }
                if seen[i] {
                    return Err(SolverError::DimensionMismatch(format!(
                        "mode {j}: duplicate switch target {i}"
                    )));
                }
                seen[i] = true;
                if costs[j][k].len() != states {
                    return Err(SolverError::DimensionMismatch(format!(
                        "cost vector for edge {j}->{i} has length {}",
                        costs[j][k].len()
                    )));
                }
                for x in 0..states {
                    if costs[j][k][x] < cost_floor {
                        return Err(SolverError::InvalidRates(format!(
                            "cost for edge {j}->{i} at state {x} is {} below the floor {cost_floor}",
                            costs[j][k][x]
                        )));
                    }
                }
            }
        }
        Ok(BarrierSystem {
            modes,
            states,
            adjacency,
            costs,
            form,
            cost_floor,
        })
    }

    /// Barrier with no switching allowed anywhere (all `A_j` empty).
    pub fn none(modes: usize, states: usize) -> Self {
        BarrierSystem {
            modes,
            states,
            adjacency: vec![Vec::new(); modes],
            costs: vec![Vec::new(); modes],
            form: BarrierForm::CostForm,
            cost_floor: 1.0,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.modes
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn form(&self) -> &BarrierForm {
        &self.form
    }

    pub fn cost_floor(&self) -> f64 {
        self.cost_floor
    }

    pub fn is_cost_form(&self) -> bool {
        matches!(self.form, BarrierForm::CostForm)
    }

    /// Switching cost `c_ji(x)`, if `i` is adjacent to `j`.
    pub fn cost(&self, j: usize, i: usize, x: usize) -> Option<f64> {
        let k = self.adjacency[j].iter().position(|&t| t == i)?;
        Some(self.costs[j][k][x])
    }

    fn phi(&self, a: f64) -> f64 {
        match self.form {
            BarrierForm::CostForm => a,
            BarrierForm::General { cap } => a.min(cap),
        }
    }

    fn h_edge(&self, j: usize, k: usize, x: usize, a: f64) -> f64 {
        -self.costs[j][k][x] + self.phi(a)
    }

    /// `H^j(x, y)`; `None` encodes the maximum over an empty adjacency set.
    pub fn eval_mode(&self, j: usize, x: usize, y: &[f64]) -> SolverResult<Option<f64>> {
        if y.len() != self.modes {
            return Err(SolverError::DimensionMismatch(format!(
                "mode vector length {} of {}",
                y.len(),
                self.modes
            )));
        }
        if x >= self.states {
            return Err(SolverError::DimensionMismatch(format!(
                "state {x} of {}",
                self.states
            )));
        }
        let mut best: Option<f64> = None;
        for (k, &i) in self.adjacency[j].iter().enumerate() {
            let v = self.h_edge(j, k, x, y[i]);
            best = Some(match best {
                Some(b) if b >= v => b,
                _ => v,
            });
        }
        Ok(best)
    }

    /// All components of `H(x, y)`.
    pub fn eval(&self, x: usize, y: &[f64]) -> SolverResult<Vec<Option<f64>>> {
        (0..self.modes).map(|j| self.eval_mode(j, x, y)).collect()
    }
}

/// Witness of a closed switching chain: the cycle of modes, the state, and a
/// value at which the chain (nearly) closes.
#[derive(Debug, Clone)]
pub struct LoopWitness {
    pub cycle: Vec<usize>,
    pub state: usize,
    pub value: f64,
    pub closure_gap: f64,
}

/// Checks that no directed switching cycle can close at zero total cost.
///
/// For cost-form barriers every cycle carries at least `cost_floor` per edge,
/// so the answer is affirmative whenever the floor is positive; the check
/// still walks every simple cycle and verifies the minimum total cost
/// numerically. For the general form a seeded grid search over chain values
/// looks for near-closures and reports the first as a witness.
pub fn check_no_loop(bar: &BarrierSystem) -> (bool, Option<LoopWitness>) {
    let cycles = simple_cycles(bar.adjacency());
    if cycles.is_empty() {
        return (true, None);
    }
    match bar.form {
        BarrierForm::CostForm => {
            for cycle in &cycles {
                let mut total = 0.0;
                for w in 0..cycle.len() {
                    let j = cycle[w];
                    let i = cycle[(w + 1) % cycle.len()];
                    let k = bar.adjacency[j].iter().position(|&t| t == i).unwrap();
                    let min_cost = (0..bar.states)
                        .map(|x| bar.costs[j][k][x])
                        .fold(f64::INFINITY, f64::min);
                    total += min_cost;
                }
                if total <= 0.0 {
                    return (
                        false,
                        Some(LoopWitness {
                            cycle: cycle.clone(),
                            state: 0,
                            value: 0.0,
                            closure_gap: total,
                        }),
                    );
                }
            }
            (true, None)
        }
        BarrierForm::General { cap } => {
            let cost_bound = bar
                .costs
                .iter()
                .flatten()
                .flat_map(|c| c.iter())
                .fold(0.0f64, |m, &c| m.max(c.abs()));
            let r = 2.0 * (cost_bound * bar.modes as f64 + cap.abs() + 1.0);
            for cycle in &cycles {
                for x in 0..bar.states {
                    // Chain y_1 = h_{j1 j2}(y_2), ..., y_k = h_{jk j1}(y_1):
                    // feed y through the edges in reverse order and look for a
                    // fixed point of the composition.
                    let compose = |y: f64| -> f64 {
                        let mut v = y;
                        for w in (0..cycle.len()).rev() {
                            let j = cycle[w];
                            let i = cycle[(w + 1) % cycle.len()];
                            let k = bar.adjacency[j].iter().position(|&t| t == i).unwrap();
                            v = bar.h_edge(j, k, x, v);
                        }
                        v
                    };
                    let grid = 512;
                    for s in 0..=grid {
                        let y = -r + 2.0 * r * s as f64 / grid as f64;
                        let gap = compose(y) - y;
                        if gap.abs() < 1e-9 {
                            return (
                                false,
                                Some(LoopWitness {
                                    cycle: cycle.clone(),
                                    state: x,
                                    value: y,
                                    closure_gap: gap,
                                }),
                            );
                        }
                    }
                }
            }
            (true, None)
        }
    }
}

/// All simple directed cycles, each reported once starting from its smallest
/// mode.
fn simple_cycles(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    fn dfs(
        start: usize,
        v: usize,
        adjacency: &[Vec<usize>],
        path: &mut Vec<usize>,
        on_path: &mut [bool],
        cycles: &mut Vec<Vec<usize>>,
    ) {
        path.push(v);
        on_path[v] = true;
        for &w in &adjacency[v] {
            if w == start {
                cycles.push(path.clone());
            } else if w > start && !on_path[w] {
                dfs(start, w, adjacency, path, on_path, cycles);
            }
        }
        on_path[v] = false;
        path.pop();
    }

    let n = adjacency.len();
    let mut cycles = Vec::new();
    let mut path = Vec::new();
    let mut on_path = vec![false; n];
    for start in 0..n {
        dfs(
            start,
            start,
            adjacency,
            &mut path,
            &mut on_path,
            &mut cycles,
        );
    }
    cycles
}

/// Replicated sub/supersolution pair sandwiching every minimal solution.
#[derive(Debug, Clone)]
pub struct Envelope {
    /// `N x n`; row `j` is the subsolution for mode `j`.
    pub lower: DMatrix<f64>,
    /// `N x n`; dominates its own barrier image.
    pub upper: DMatrix<f64>,
}

impl Envelope {
    /// `max |upper| + max |lower|`: the scale against which contact and
    /// complementarity tolerances are measured.
    pub fn scale(&self) -> f64 {
        self.upper.amax() + self.lower.amax()
    }
}

/// Builds the replicated envelope: the upper row is the resolvent of
/// `sum_j (b^j)^+` with `b^j` the per-mode source bound, the lower row solves
/// the stationary equation with the mode-wise minimal diagonal driver. For a
/// single mode both collapse to the plain resolvent of `psi + mu`.
pub fn build_envelope(
    gen: &Generator,
    drv: &DriverSystem,
    bar: &BarrierSystem,
) -> SolverResult<Envelope> {
    let n = gen.state_count();
    let modes = drv.mode_count();
    if drv.state_count() != n || bar.state_count() != n || bar.mode_count() != modes {
        return Err(SolverError::DimensionMismatch(
            "generator, driver and barrier dimensions disagree".into(),
        ));
    }
    let neg_l = -gen.rates();
    let zero = DVector::zeros(n);

    let lower_fn = EnvelopeLowerFn(drv);
    let lower_scalar = elliptic_scalar_solve(&neg_l, &lower_fn, &zero, &zero)?;

    let upper_scalar = if modes == 1 {
        lower_scalar.clone()
    } else {
        let mut b_sum = DVector::zeros(n);
        for x in 0..n {
            for j in 0..modes {
                b_sum[x] += drv.upper_source_bound(j, x).max(0.0);
            }
        }
        gen.resolvent_solve_vec(&b_sum)?
    };

    let lower = DMatrix::from_fn(modes, n, |_, x| lower_scalar[x]);
    let upper = DMatrix::from_fn(modes, n, |_, x| upper_scalar[x]);

    for x in 0..n {
        if lower[(0, x)] > upper[(0, x)] + 1e-9 {
            return Err(SolverError::EnvelopeDominationFailed(format!(
                "lower {} above upper {} at state {x}",
                lower[(0, x)],
                upper[(0, x)]
            )));
        }
        let y_up: Vec<f64> = (0..modes).map(|j| upper[(j, x)]).collect();
        for j in 0..modes {
            if let Some(h) = bar.eval_mode(j, x, &y_up)? {
                if h > upper[(j, x)] + 1e-9 {
                    return Err(SolverError::EnvelopeDominationFailed(format!(
                        "H^{j}(x, upper) = {h} exceeds upper = {} at state {x}",
                        upper[(j, x)]
                    )));
                }
            }
        }
    }
    Ok(Envelope { lower, upper })
}
