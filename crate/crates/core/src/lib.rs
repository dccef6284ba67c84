//! Solver suite for optimal switching problems on killed finite-state Markov
//! chains, and for the obliquely reflected backward systems and stationary
//! quasi-variational inequalities that represent their value functions.
//!
//! The library is organised around a small set of interlocking pieces:
//!
//! - [`chain`] — sub-Markovian generator matrices with killing (transient
//!   chains), resolvents, transition kernels and exact path simulation;
//! - [`drivers`] — quasi-monotone driver systems, oblique obstacle systems
//!   built from switching costs, and sub/supersolution envelopes;
//! - [`bsde`] — discrete-time backward solvers: monotone implicit steps for
//!   single equations and the monotone Picard construction of minimal
//!   solutions for coupled systems;
//! - [`reflection`] — Snell envelopes, reflected backward equations, the
//!   iterated oblique-reflection scheme and its penalized approximation;
//! - [`switching`] — switching strategies, exact policy evaluation, dynamic
//!   programming for the switching value, brute-force policy enumeration and
//!   Monte Carlo verification;
//! - [`qvi`] — the stationary complementarity system: policy iteration,
//!   penalized fixed points, reflection-measure extraction and Feynman-Kac
//!   verification;
//! - [`instance`] — the JSON instance format shared by the CLI and the test
//!   suites.
//!
//! Everything is kept at "desk scale": states and modes are small enough for
//! dense linear algebra, which makes every claim directly checkable against
//! brute-force or Monte Carlo oracles.

// Index-based loops mirror the (k, j, x) structure of the schemes and stay.
#![allow(clippy::needless_range_loop)]

pub mod bsde;
pub mod chain;
pub mod drivers;
pub mod error;
pub mod instance;
pub mod qvi;
pub mod reflection;
mod roots;
pub mod switching;
pub mod tol;

pub use error::{SolverError, SolverResult};
