//! Killed finite-state Markov chains: generators, resolvents, transition
//! kernels and exact path simulation.
//!
//! The basic object is a sub-Markovian rate matrix `L` on `n` states: all
//! off-diagonal entries are nonnegative and every row sum is nonpositive.
//! The killing rate of state `x` is `kappa(x) = -(row sum of x) >= 0`; the
//! sampled chain dies at the first killing event, and its death time plays
//! the role of the lifetime `zeta`. Transience means `-L` is invertible with
//! an entrywise nonnegative inverse — this is checked at construction, never
//! assumed. On a transient chain the resolvent
//!
//! ```text
//! u = (-L)^{-1} g,   equivalently   u(x) = E_x [ integral of g(X_r) dr over [0, zeta) ]
//! ```
//!
//! exists for every source vector `g`, and the identity on the right is the
//! Feynman-Kac representation that the Monte Carlo machinery in this module
//! verifies sample-wise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{SolverError, SolverResult};
use crate::tol;

/// A vector of payoff mass per state; on a finite chain every smooth measure
/// is a density with respect to the counting measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureDensity {
    values: DVector<f64>,
}

impl MeasureDensity {
    pub fn new(values: DVector<f64>) -> SolverResult<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::DimensionMismatch(
                "measure density has non-finite entries".into(),
            ));
        }
        Ok(MeasureDensity { values })
    }

    pub fn from_slice(values: &[f64]) -> SolverResult<Self> {
        Self::new(DVector::from_row_slice(values))
    }

    pub fn zero(n: usize) -> Self {
        MeasureDensity {
            values: DVector::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// Total-variation norm, i.e. the sum of absolute entries.
    pub fn tv_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// Sub-Markovian generator with killing, together with its transience
/// certificate.
#[derive(Debug, Clone)]
pub struct Generator {
    n: usize,
    rates: DMatrix<f64>,
    kappa: DVector<f64>,
    labels: Option<Vec<String>>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    max_total_rate: f64,
    /// Max row sum of `(-L)^{-1}`: a bound on the expected lifetime from any
    /// state, recorded by the transience check.
    lifetime_bound: f64,
}

impl Generator {
    /// Builds a generator from an explicit rate matrix, validating the rate
    /// invariants and computing the transience certificate.
    pub fn from_rates(rates: DMatrix<f64>, labels: Option<Vec<String>>) -> SolverResult<Self> {
        let n = rates.nrows();
        if rates.ncols() != n || n == 0 {
            return Err(SolverError::InvalidRates(format!(
                "rate matrix must be square and nonempty, got {}x{}",
                rates.nrows(),
                rates.ncols()
            )));
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(SolverError::DimensionMismatch(format!(
                    "{} labels for {} states",
                    l.len(),
                    n
                )));
            }
        }
        let mut rates = rates;
        for i in 0..n {
            for j in 0..n {
                let v = rates[(i, j)];
                if !v.is_finite() {
                    return Err(SolverError::InvalidRates(format!(
                        "non-finite rate at ({i},{j})"
                    )));
                }
                if i != j && v < 0.0 {
                    // Stencil assembly can leave -1e-16 noise; anything larger is a real error.
                    if v > -1e-12 {
                        rates[(i, j)] = 0.0;
                    } else {
                        return Err(SolverError::InvalidRates(format!(
                            "negative off-diagonal rate {v} at ({i},{j})"
                        )));
                    }
                }
            }
        }
        let mut kappa = DVector::zeros(n);
        for i in 0..n {
            let row_sum: f64 = rates.row(i).iter().sum();
            if row_sum > 1e-12 {
                return Err(SolverError::InvalidRates(format!(
                    "row {i} has positive sum {row_sum}"
                )));
            }
            kappa[i] = (-row_sum).max(0.0);
        }
        let neg_l = -&rates;
        let lu = neg_l.clone().lu();
        if !lu.is_invertible() {
            return Err(SolverError::NonTransient("-L is singular".into()));
        }
        // Entrywise nonnegativity of (-L)^{-1}, column by column.
        let mut lifetime_bound: f64 = 0.0;
        let inv_row_sums = match lu.solve(&DVector::from_element(n, 1.0)) {
            Some(s) => s,
            None => return Err(SolverError::NonTransient("-L is singular".into())),
        };
        for i in 0..n {
            lifetime_bound = lifetime_bound.max(inv_row_sums[i]);
        }
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let col = lu
                .solve(&e)
                .ok_or_else(|| SolverError::NonTransient("-L is singular".into()))?;
            for i in 0..n {
                if col[i] < -1e-9 * (1.0 + lifetime_bound) {
                    return Err(SolverError::NonTransient(format!(
                        "(-L)^{{-1}} has negative entry {} at ({i},{j})",
                        col[i]
                    )));
                }
            }
        }
        let max_total_rate = (0..n).map(|i| -rates[(i, i)]).fold(0.0, f64::max);
        Ok(Generator {
            n,
            rates,
            kappa,
            labels,
            lu,
            max_total_rate,
            lifetime_bound,
        })
    }

    pub fn state_count(&self) -> usize {
        self.n
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    /// Killing rate per state, `kappa(x) = -(row sum of x)`.
    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Largest total exit rate over all states.
    pub fn max_total_rate(&self) -> f64 {
        self.max_total_rate
    }

    /// Max row sum of `(-L)^{-1}`, a bound on expected lifetimes.
    pub fn lifetime_bound(&self) -> f64 {
        self.lifetime_bound
    }

    /// Solves `-L u = g` exactly; `u` is entrywise nonnegative whenever
    /// `g >= 0`.
    pub fn resolvent_solve(&self, g: &MeasureDensity) -> SolverResult<DVector<f64>> {
        if g.len() != self.n {
            return Err(SolverError::DimensionMismatch(format!(
                "source length {} for {} states",
                g.len(),
                self.n
            )));
        }
        self.lu
            .solve(g.values())
            .ok_or_else(|| SolverError::NonTransient("factorization failed".into()))
    }

    /// Resolvent solve for a raw vector right-hand side.
    pub fn resolvent_solve_vec(&self, g: &DVector<f64>) -> SolverResult<DVector<f64>> {
        if g.len() != self.n {
            return Err(SolverError::DimensionMismatch(format!(
                "source length {} for {} states",
                g.len(),
                self.n
            )));
        }
        self.lu
            .solve(g)
            .ok_or_else(|| SolverError::NonTransient("factorization failed".into()))
    }

    /// Sub-stochastic transition kernel `exp(dt L)` via the uniformization
    /// series, truncated once the Poisson tail drops below
    /// [`tol::UNIFORMIZATION_TOL`].
    pub fn transition_step(&self, dt: f64) -> SolverResult<TransitionKernel> {
        if dt < 0.0 || !dt.is_finite() {
            return Err(SolverError::InvalidGrid(format!("dt = {dt}")));
        }
        if dt == 0.0 || self.max_total_rate == 0.0 {
            return Ok(TransitionKernel {
                dt,
                matrix: DMatrix::identity(self.n, self.n),
            });
        }
        // Halve until the Poisson parameter is moderate, then square back up;
        // keeps the series short and the weights well above underflow.
        let mut halvings = 0u32;
        let mut h = dt;
        while self.max_total_rate * h > 20.0 {
            h *= 0.5;
            halvings += 1;
        }
        let mut m = self.uniformization_series(h)?;
        for _ in 0..halvings {
            m = &m * &m;
        }
        let kernel = TransitionKernel { dt, matrix: m };
        kernel.validate()?;
        Ok(kernel)
    }

    fn uniformization_series(&self, h: f64) -> SolverResult<DMatrix<f64>> {
        let lambda = self.max_total_rate;
        let a = DMatrix::identity(self.n, self.n) + &self.rates / lambda;
        let mut power = DMatrix::identity(self.n, self.n);
        let mut weight = (-lambda * h).exp();
        let mut acc = &power * weight;
        let mut cum = weight;
        let mut k = 0usize;
        while 1.0 - cum > tol::UNIFORMIZATION_TOL {
            k += 1;
            if k > 100_000 {
                return Err(SolverError::NoConvergence(
                    "uniformization series did not truncate".into(),
                ));
            }
            power = &a * &power;
            weight *= lambda * h / k as f64;
            acc += &power * weight;
            cum += weight;
        }
        Ok(acc)
    }

    /// Expected within-step occupation kernel `R(dt) = integral of exp(sL) ds
    /// over [0, dt]`, so that `(R(dt) g)(x)` is the exact expected integral of
    /// `g` along the chain over one step of length `dt` started at `x`.
    pub fn occupation_step(&self, dt: f64) -> SolverResult<DMatrix<f64>> {
        if dt < 0.0 || !dt.is_finite() {
            return Err(SolverError::InvalidGrid(format!("dt = {dt}")));
        }
        if dt == 0.0 {
            return Ok(DMatrix::zeros(self.n, self.n));
        }
        if self.max_total_rate == 0.0 {
            return Ok(DMatrix::identity(self.n, self.n) * dt);
        }
        let mut halvings = 0u32;
        let mut h = dt;
        while self.max_total_rate * h > 20.0 {
            h *= 0.5;
            halvings += 1;
        }
        let mut r = self.occupation_series(h)?;
        if halvings > 0 {
            let mut p = self.transition_step(h)?.matrix;
            for _ in 0..halvings {
                // R(2h) = R(h) + P(h) R(h), P(2h) = P(h)^2.
                r = &r + &p * &r;
                p = &p * &p;
            }
        }
        Ok(r)
    }

    fn occupation_series(&self, h: f64) -> SolverResult<DMatrix<f64>> {
        let lambda = self.max_total_rate;
        let a = DMatrix::identity(self.n, self.n) + &self.rates / lambda;
        let mut power = DMatrix::identity(self.n, self.n);
        // Tail weights: integral of the k-th Poisson weight over [0, h] equals
        // P(Poisson(lambda h) > k) / lambda.
        let mut pois = (-lambda * h).exp();
        let mut cum = pois;
        let mut tail = (1.0 - cum) / lambda;
        let mut acc = &power * tail;
        let mut k = 0usize;
        while tail > tol::UNIFORMIZATION_TOL * h {
            k += 1;
            if k > 100_000 {
                return Err(SolverError::NoConvergence(
                    "occupation series did not truncate".into(),
                ));
            }
            power = &a * &power;
            pois *= lambda * h / k as f64;
            cum += pois;
            tail = ((1.0 - cum) / lambda).max(0.0);
            acc += &power * tail;
        }
        Ok(acc)
    }

    /// Exact event-driven simulation up to the lifetime or `horizon_cap`,
    /// whichever comes first. Deterministic function of the seed.
    pub fn sample_path(&self, x0: usize, seed: u64, horizon_cap: f64) -> SolverResult<Path> {
        if x0 >= self.n {
            return Err(SolverError::DimensionMismatch(format!(
                "start state {x0} out of range ({} states)",
                self.n
            )));
        }
        if horizon_cap <= 0.0 || horizon_cap.is_nan() {
            return Err(SolverError::InvalidGrid(format!(
                "horizon cap {horizon_cap} must be positive"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut t = 0.0f64;
        let mut x = x0;
        let mut jump_times = Vec::new();
        let mut states = vec![x0];
        loop {
            let total = -self.rates[(x, x)];
            debug_assert!(total > 0.0, "transient chains have no zero-rate rows");
            let u: f64 = rng.random();
            let hold = -(1.0 - u).ln() / total;
            if t + hold >= horizon_cap {
                return Ok(Path {
                    jump_times,
                    states,
                    killed_at: horizon_cap,
                    capped: true,
                });
            }
            t += hold;
            let v: f64 = rng.random::<f64>() * total;
            let mut c = self.kappa[x];
            if v < c {
                return Ok(Path {
                    jump_times,
                    states,
                    killed_at: t,
                    capped: false,
                });
            }
            let mut target = x;
            for y in 0..self.n {
                if y == x {
                    continue;
                }
                c += self.rates[(x, y)];
                if v < c {
                    target = y;
                    break;
                }
            }
            // Rounding can push v past the last cumulative bin; the final
            // off-diagonal state takes the overflow.
            if target == x {
                target = (0..self.n)
                    .rev()
                    .find(|&y| y != x && self.rates[(x, y)] > 0.0)
                    .unwrap_or(x);
                if target == x {
                    return Ok(Path {
                        jump_times,
                        states,
                        killed_at: t,
                        capped: false,
                    });
                }
            }
            x = target;
            jump_times.push(t);
            states.push(x);
        }
    }
}

/// Sub-stochastic one-step kernel `exp(dt L)`.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub dt: f64,
    pub matrix: DMatrix<f64>,
}

impl TransitionKernel {
    fn validate(&self) -> SolverResult<()> {
        let n = self.matrix.nrows();
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let v = self.matrix[(i, j)];
                if v < -1e-14 {
                    return Err(SolverError::InvalidRates(format!(
                        "kernel entry {v} at ({i},{j})"
                    )));
                }
                row_sum += v;
            }
            if row_sum > 1.0 + 1e-12 {
                return Err(SolverError::InvalidRates(format!(
                    "kernel row {i} sums to {row_sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn state_count(&self) -> usize {
        self.matrix.nrows()
    }

    /// `(P v)(x) = sum over x' of P(x, x') v(x')`, accumulated in ascending
    /// state order. Every backward solver funnels through this single loop so
    /// that scalar and system solves agree bitwise.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.matrix.nrows();
        let mut out = DVector::zeros(n);
        for x in 0..n {
            let mut acc = 0.0;
            for xp in 0..n {
                acc += self.matrix[(x, xp)] * v[xp];
            }
            out[x] = acc;
        }
        out
    }

    /// Largest row sum: the worst-case one-step survival probability.
    pub fn survival_factor(&self) -> f64 {
        let n = self.matrix.nrows();
        (0..n)
            .map(|i| self.matrix.row(i).iter().sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// One sampled trajectory of the killed chain.
///
/// `states[0]` is the start state and `states[k+1]` the state entered at
/// `jump_times[k]`; nothing is recorded after `killed_at`. When the horizon
/// cap was hit before the killing event, `capped` is set and `killed_at`
/// equals the cap.
#[derive(Debug, Clone)]
pub struct Path {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub killed_at: f64,
    pub capped: bool,
}

impl Path {
    /// State occupied at time `t`, or `None` at or past the lifetime.
    pub fn state_at(&self, t: f64) -> Option<usize> {
        if t >= self.killed_at && !(self.capped && t == self.killed_at) {
            return None;
        }
        if t >= self.killed_at {
            return None;
        }
        let mut idx = 0;
        for (k, &jt) in self.jump_times.iter().enumerate() {
            if jt <= t {
                idx = k + 1;
            } else {
                break;
            }
        }
        Some(self.states[idx])
    }

    /// Piecewise-constant segments `(state, from, to)` covering `[0, killed_at)`.
    pub fn segments(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::with_capacity(self.states.len());
        let mut start = 0.0;
        for (k, &jt) in self.jump_times.iter().enumerate() {
            out.push((self.states[k], start, jt));
            start = jt;
        }
        out.push((*self.states.last().unwrap(), start, self.killed_at));
        out
    }
}

/// Exact time integral of `running` along the path, plus `terminal_cap_value`
/// if the path hit the horizon cap alive.
pub fn path_functional(
    path: &Path,
    running: &MeasureDensity,
    terminal_cap_value: f64,
) -> SolverResult<f64> {
    for &s in &path.states {
        if s >= running.len() {
            return Err(SolverError::DimensionMismatch(format!(
                "path visits state {s} but density has {} entries",
                running.len()
            )));
        }
    }
    let mut acc = 0.0;
    for (s, a, b) in path.segments() {
        acc += running.values()[s] * (b - a);
    }
    if path.capped {
        acc += terminal_cap_value;
    }
    Ok(acc)
}

/// Mean and standard error with compensated summation in fixed (index) order,
/// so parallel producers aggregate identically regardless of scheduling.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = kahan_sum(values.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = kahan_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    let var = ss / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Instance families for [`build_generator`].
#[derive(Debug, Clone)]
pub enum GeneratorSpec {
    /// Row-major explicit rate matrix.
    Explicit { rates: Vec<Vec<f64>> },
    /// Nearest-neighbour drift-diffusion stencil on a 1-d grid with uniform
    /// killing: jump right at `a/h^2 + b/(2h)`, left at `a/h^2 - b/(2h)`;
    /// boundary states keep only the inward jump, so every row sum is
    /// `-killing`.
    DriftDiffusion {
        states: usize,
        diffusion: f64,
        drift: f64,
        killing: f64,
        mesh: f64,
    },
    /// Truncated power-law jump kernel on a 1-d grid with uniform killing:
    /// rate `(h |i-j|)^{-(1+exponent)}` for `0 < |i-j| <= radius`.
    JumpKernel {
        states: usize,
        exponent: f64,
        radius: usize,
        killing: f64,
        mesh: f64,
    },
}

/// Assembles a generator from an instance family description and checks all
/// invariants, including the transience certificate.
pub fn build_generator(
    spec: &GeneratorSpec,
    labels: Option<Vec<String>>,
) -> SolverResult<Generator> {
    let rates = match spec {
        GeneratorSpec::Explicit { rates } => {
            let n = rates.len();
            if n == 0 || rates.iter().any(|r| r.len() != n) {
                return Err(SolverError::InvalidRates(
                    "explicit rate matrix must be square and nonempty".into(),
                ));
            }
            DMatrix::from_fn(n, n, |i, j| rates[i][j])
        }
        GeneratorSpec::DriftDiffusion {
            states,
            diffusion,
            drift,
            killing,
            mesh,
        } => {
            let n = *states;
            if n == 0 || *mesh <= 0.0 {
                return Err(SolverError::InvalidRates(
                    "drift-diffusion family needs states >= 1 and mesh > 0".into(),
                ));
            }
            if *killing <= 0.0 {
                return Err(SolverError::NonTransient(
                    "drift-diffusion family needs killing > 0".into(),
                ));
            }
            let h = *mesh;
            let right = diffusion / (h * h) + drift / (2.0 * h);
            let left = diffusion / (h * h) - drift / (2.0 * h);
            if right < 0.0 || left < 0.0 {
                return Err(SolverError::InvalidRates(format!(
                    "stencil rates negative (right {right}, left {left}); reduce |drift| * mesh"
                )));
            }
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut out = 0.0;
                if i + 1 < n {
                    m[(i, i + 1)] = right;
                    out += right;
                }
                if i > 0 {
                    m[(i, i - 1)] = left;
                    out += left;
                }
                m[(i, i)] = -out - killing;
            }
            m
        }
        GeneratorSpec::JumpKernel {
            states,
            exponent,
            radius,
            killing,
            mesh,
        } => {
            let n = *states;
            if n == 0 || *mesh <= 0.0 || *exponent <= 0.0 {
                return Err(SolverError::InvalidRates(
                    "jump-kernel family needs states >= 1, mesh > 0 and exponent > 0".into(),
                ));
            }
            if *killing <= 0.0 {
                return Err(SolverError::NonTransient(
                    "jump-kernel family needs killing > 0".into(),
                ));
            }
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut out = 0.0;
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let d = i.abs_diff(j);
                    if d <= *radius {
                        let r = (mesh * d as f64).powf(-(1.0 + exponent));
                        m[(i, j)] = r;
                        out += r;
                    }
                }
                m[(i, i)] = -out - killing;
            }
            m
        }
    };
    Generator::from_rates(rates, labels)
}
