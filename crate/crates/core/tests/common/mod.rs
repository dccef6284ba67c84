#![allow(dead_code)]

//! Seeded random instance generators shared by the integration suites.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use oblique_core::bsde::TimeGrid;
use oblique_core::chain::{Generator, MeasureDensity};
use oblique_core::drivers::{BarrierForm, BarrierSystem, Coupling, DriverSystem};

pub struct RandomInstance {
    pub gen: Generator,
    pub grid: TimeGrid,
    pub drv: DriverSystem,
    pub bar: BarrierSystem,
    /// Mode-independent terminal vector (equals every row of `drv.xi()`).
    pub terminal: DVector<f64>,
}

/// Random transient chain: dense positive off-diagonal rates plus a strictly
/// positive killing rate in every state.
pub fn random_generator(rng: &mut ChaCha12Rng, n: usize) -> Generator {
    loop {
        let mut rates = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut out = 0.0;
            for j in 0..n {
                if i != j && rng.random_bool(0.8) {
                    let r = rng.random_range(0.1..1.5);
                    rates[(i, j)] = r;
                    out += r;
                }
            }
            let kappa = rng.random_range(0.2..1.0);
            rates[(i, i)] = -out - kappa;
        }
        if let Ok(g) = Generator::from_rates(rates, None) {
            return g;
        }
    }
}

fn guarded_dt(gen: &Generator, rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    let dt = rng.random_range(lo..hi);
    dt.min(0.45 / gen.max_total_rate())
}

/// Tiny instance for exhaustive policy enumeration: `n <= 2`, two modes,
/// at most three steps, at most one switch target per mode.
pub fn random_tiny(seed: u64) -> RandomInstance {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let gen = random_generator(&mut rng, n);
    let steps = rng.random_range(1..=3);
    let dt = guarded_dt(&gen, &mut rng, 0.05, 0.2);
    let grid = TimeGrid::new(dt, steps).unwrap();

    let modes = 2;
    let psi: Vec<DVector<f64>> = (0..modes)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-2.0..3.0)))
        .collect();
    let terminal = DVector::from_fn(n, |_, _| rng.random_range(-0.5..1.0));
    let xi = vec![terminal.clone(); modes];
    let mu: Vec<MeasureDensity> = (0..modes)
        .map(|_| {
            MeasureDensity::new(DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3))).unwrap()
        })
        .collect();
    let drv = DriverSystem::new(psi, Coupling::Decoupled, mu, xi).unwrap();

    // Each mode may or may not see the other one.
    let floor = 0.3;
    let mut adjacency = vec![Vec::new(); modes];
    let mut costs = vec![Vec::new(); modes];
    for j in 0..modes {
        if rng.random_bool(0.8) {
            adjacency[j].push(1 - j);
            costs[j].push(DVector::from_fn(n, |_, _| rng.random_range(floor..2.0)));
        }
    }
    let bar = BarrierSystem::new(n, adjacency, costs, BarrierForm::CostForm, floor).unwrap();
    RandomInstance {
        gen,
        grid,
        drv,
        bar,
        terminal,
    }
}

/// Decoupled cost-form instance at moderate scale for the reflected/DP
/// identities: `n <= 10`, `N <= 3`, `K <= 200`.
pub fn random_decoupled(seed: u64) -> RandomInstance {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let gen = random_generator(&mut rng, n);
    let steps = rng.random_range(20..=200);
    let dt = guarded_dt(&gen, &mut rng, 0.02, 0.05);
    let grid = TimeGrid::new(dt, steps).unwrap();

    let modes = rng.random_range(2..=3);
    let psi: Vec<DVector<f64>> = (0..modes)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-2.0..3.0)))
        .collect();
    let terminal = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
    let xi = vec![terminal.clone(); modes];
    let mu: Vec<MeasureDensity> = (0..modes)
        .map(|_| {
            MeasureDensity::new(DVector::from_fn(n, |_, _| rng.random_range(-0.2..0.4))).unwrap()
        })
        .collect();
    let drv = DriverSystem::new(psi, Coupling::Decoupled, mu, xi).unwrap();

    let floor = 0.3;
    let mut adjacency = vec![Vec::new(); modes];
    let mut costs = vec![Vec::new(); modes];
    for j in 0..modes {
        for i in 0..modes {
            if i != j && rng.random_bool(0.7) {
                adjacency[j].push(i);
                costs[j].push(DVector::from_fn(n, |_, _| rng.random_range(floor..2.5)));
            }
        }
    }
    let bar = BarrierSystem::new(n, adjacency, costs, BarrierForm::CostForm, floor).unwrap();
    RandomInstance {
        gen,
        grid,
        drv,
        bar,
        terminal,
    }
}

/// A driver system together with an entrywise-dominating copy (identical
/// coupling, shifted psi/mu/xi) on a shared chain and grid.
pub fn random_ordered_pair(seed: u64) -> (Generator, TimeGrid, DriverSystem, DriverSystem) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let gen = random_generator(&mut rng, n);
    let steps = rng.random_range(10..=40);
    let dt = guarded_dt(&gen, &mut rng, 0.02, 0.06);
    let grid = TimeGrid::new(dt, steps).unwrap();

    let modes = rng.random_range(1..=3);
    let psi: Vec<DVector<f64>> = (0..modes)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)))
        .collect();
    let mu: Vec<MeasureDensity> = (0..modes)
        .map(|_| {
            MeasureDensity::new(DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3))).unwrap()
        })
        .collect();
    let xi: Vec<DVector<f64>> = (0..modes)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5)))
        .collect();

    let coupling = match rng.random_range(0..3) {
        0 => Coupling::Decoupled,
        1 => {
            // Random nonpositive-row-sum coupling matrices.
            let g: Vec<DMatrix<f64>> = (0..n)
                .map(|_| {
                    let mut m = DMatrix::zeros(modes, modes);
                    for j in 0..modes {
                        let mut off = 0.0;
                        for i in 0..modes {
                            if i != j {
                                let v = rng.random_range(0.0..0.3);
                                m[(j, i)] = v;
                                off += v;
                            }
                        }
                        m[(j, j)] = -off - rng.random_range(0.0..0.5);
                    }
                    m
                })
                .collect();
            Coupling::Affine { g }
        }
        _ => {
            let mut alpha = DMatrix::zeros(modes, modes);
            for j in 0..modes {
                for i in 0..modes {
                    if i != j {
                        alpha[(j, i)] = rng.random_range(0.0..0.4);
                    }
                }
            }
            Coupling::SmoothCoupled {
                lambda: (0..modes).map(|_| rng.random_range(0.0..1.0)).collect(),
                alpha,
            }
        }
    };

    let psi_hi: Vec<DVector<f64>> = psi
        .iter()
        .map(|p| DVector::from_fn(n, |x, _| p[x] + rng.random_range(0.0..1.0)))
        .collect();
    let mu_hi: Vec<MeasureDensity> = mu
        .iter()
        .map(|m| {
            MeasureDensity::new(DVector::from_fn(n, |x, _| {
                m.values()[x] + rng.random_range(0.0..0.5)
            }))
            .unwrap()
        })
        .collect();
    let xi_hi: Vec<DVector<f64>> = xi
        .iter()
        .map(|v| DVector::from_fn(n, |x, _| v[x] + rng.random_range(0.0..0.5)))
        .collect();

    let small = DriverSystem::new(psi, coupling.clone(), mu, xi).unwrap();
    let large = DriverSystem::new(psi_hi, coupling, mu_hi, xi_hi).unwrap();
    (gen, grid, small, large)
}
