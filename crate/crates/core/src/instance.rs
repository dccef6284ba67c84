//! JSON instance format: one document carries the chain, the grid, the
//! driver system, the obstacle system and the run settings (seeds, path
//! counts, penalty levels, tolerance overrides).
//!
//! Parsing is two-phase: serde decodes the raw document (unknown fields are
//! rejected), then a semantic pass checks every cross-reference — dimensions,
//! adjacency targets, cost shapes — and reports *all* violations with field
//! paths instead of stopping at the first.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::TimeGrid;
use crate::chain::{build_generator, Generator, GeneratorSpec, MeasureDensity};
use crate::drivers::{BarrierForm, BarrierSystem, Coupling, DriverSystem};
use crate::error::SolverError;
use crate::tol::Options;

/// One schema violation with the path of the offending field.
#[derive(Debug, Clone, Serialize)]
pub struct SchemaIssue {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema errors: {}", format_issues(.0))]
    Schema(Vec<SchemaIssue>),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn format_issues(issues: &[SchemaIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.path, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub family: String,
    pub states: usize,
    #[serde(default)]
    pub rates: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub diffusion: Option<f64>,
    #[serde(default)]
    pub drift: Option<f64>,
    #[serde(default)]
    pub exponent: Option<f64>,
    #[serde(default)]
    pub radius: Option<usize>,
    #[serde(default)]
    pub killing: Option<f64>,
    #[serde(default)]
    pub mesh: Option<f64>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dt: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(default)]
    pub g: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    pub kind: String,
    pub psi: Vec<Vec<f64>>,
    #[serde(default)]
    pub mu: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub xi: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub coupling: Option<CouplingSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub form: String,
    pub adjacency: Vec<Vec<usize>>,
    /// `costs[j][k]` is the cost vector over states for the edge from mode
    /// `j` to `adjacency[j][k]`.
    pub costs: Vec<Vec<Vec<f64>>>,
    pub cost_floor: f64,
    #[serde(default)]
    pub cap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub x0: usize,
    #[serde(default)]
    pub start_mode: usize,
    #[serde(default = "default_penalty_levels")]
    pub penalty_levels: Vec<f64>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
    #[serde(default = "default_horizon_dt")]
    pub horizon_dt: f64,
    #[serde(default = "default_horizon_cap")]
    pub horizon_cap: f64,
    #[serde(default = "default_enumeration_cap")]
    pub enumeration_cap: u64,
    #[serde(default)]
    pub picard_tol: Option<f64>,
    #[serde(default)]
    pub picard_cap: Option<usize>,
    #[serde(default)]
    pub contact_tol: Option<f64>,
    #[serde(default)]
    pub complementarity_tol: Option<f64>,
    #[serde(default)]
    pub grid_guard: Option<f64>,
}

fn default_seed() -> u64 {
    7
}
fn default_paths() -> usize {
    100_000
}
fn default_penalty_levels() -> Vec<f64> {
    vec![1.0, 4.0, 16.0, 64.0, 256.0]
}
fn default_horizons() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0]
}
fn default_horizon_dt() -> f64 {
    1e-3
}
fn default_horizon_cap() -> f64 {
    40.0
}
fn default_enumeration_cap() -> u64 {
    1_000_000
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: default_seed(),
            paths: default_paths(),
            x0: 0,
            start_mode: 0,
            penalty_levels: default_penalty_levels(),
            horizons: default_horizons(),
            horizon_dt: default_horizon_dt(),
            horizon_cap: default_horizon_cap(),
            enumeration_cap: default_enumeration_cap(),
            picard_tol: None,
            picard_cap: None,
            contact_tol: None,
            complementarity_tol: None,
            grid_guard: None,
        }
    }
}

impl RunSection {
    pub fn options(&self) -> Options {
        let mut o = Options::default();
        if let Some(t) = self.picard_tol {
            o.picard_tol = t;
        }
        if let Some(c) = self.picard_cap {
            o.picard_cap = c;
        }
        if let Some(t) = self.contact_tol {
            o.contact_tol = t;
        }
        if let Some(t) = self.complementarity_tol {
            o.complementarity_tol = t;
        }
        if let Some(g) = self.grid_guard {
            o.grid_guard = g;
        }
        o
    }
}

/// The full instance document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub chain: ChainSection,
    pub grid: GridSection,
    pub driver: DriverSection,
    pub barrier: BarrierSection,
    #[serde(default)]
    pub run: RunSection,
}

/// Validated domain objects built from an instance document.
pub struct BuiltInstance {
    pub gen: Generator,
    pub grid: TimeGrid,
    pub drv: DriverSystem,
    pub bar: BarrierSystem,
    pub run: RunSection,
}

/// Parses and validates an instance file.
pub fn parse_instance(path: &Path) -> Result<InstanceFile, InstanceError> {
    let text = std::fs::read_to_string(path)?;
    parse_instance_str(&text)
}

pub fn parse_instance_str(text: &str) -> Result<InstanceFile, InstanceError> {
    let raw: InstanceFile = serde_json::from_str(text)?;
    let issues = raw.schema_issues();
    if !issues.is_empty() {
        return Err(InstanceError::Schema(issues));
    }
    Ok(raw)
}

impl InstanceFile {
    /// Semantic validation; returns every violation with its field path.
    pub fn schema_issues(&self) -> Vec<SchemaIssue> {
        let mut issues = Vec::new();
        let n = self.chain.states;
        if n == 0 {
            issues.push(SchemaIssue {
                path: "chain.states".into(),
                message: "at least one state required".into(),
            });
        }
        match self.chain.family.as_str() {
            "explicit" => match &self.chain.rates {
                None => issues.push(SchemaIssue {
                    path: "chain.rates".into(),
                    message: "explicit family requires a rate matrix".into(),
                }),
                Some(rows) => {
                    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                        issues.push(SchemaIssue {
                            path: "chain.rates".into(),
                            message: format!("rate matrix must be {n} x {n}"),
                        });
                    }
                }
            },
            "drift-diffusion" => {
                if self.chain.diffusion.is_none() || self.chain.killing.is_none() {
                    issues.push(SchemaIssue {
                        path: "chain".into(),
                        message: "drift-diffusion family requires diffusion and killing".into(),
                    });
                }
            }
            "jump-kernel" => {
                if self.chain.exponent.is_none()
                    || self.chain.radius.is_none()
                    || self.chain.killing.is_none()
                {
                    issues.push(SchemaIssue {
                        path: "chain".into(),
                        message: "jump-kernel family requires exponent, radius and killing".into(),
                    });
                }
            }
            other => issues.push(SchemaIssue {
                path: "chain.family".into(),
                message: format!(
                    "unknown family {other:?}; expected explicit, drift-diffusion or jump-kernel"
                ),
            }),
        }
        if let Some(labels) = &self.chain.labels {
            if labels.len() != n {
                issues.push(SchemaIssue {
                    path: "chain.labels".into(),
                    message: format!("{} labels for {n} states", labels.len()),
                });
            }
        }

        if self.grid.dt <= 0.0 || self.grid.dt.is_nan() {
            issues.push(SchemaIssue {
                path: "grid.dt".into(),
                message: "dt must be positive".into(),
            });
        }
        if self.grid.steps == 0 {
            issues.push(SchemaIssue {
                path: "grid.steps".into(),
                message: "steps must be positive".into(),
            });
        }

        let modes = self.driver.psi.len();
        if modes == 0 {
            issues.push(SchemaIssue {
                path: "driver.psi".into(),
                message: "at least one mode required".into(),
            });
        }
        for (j, row) in self.driver.psi.iter().enumerate() {
            if row.len() != n {
                issues.push(SchemaIssue {
                    path: format!("driver.psi[{j}]"),
                    message: format!("{} entries for {n} states", row.len()),
                });
            }
        }
        for (name, field) in [("mu", &self.driver.mu), ("xi", &self.driver.xi)] {
            if let Some(rows) = field {
                if rows.len() != modes {
                    issues.push(SchemaIssue {
                        path: format!("driver.{name}"),
                        message: format!("{} rows for {modes} modes", rows.len()),
                    });
                }
                for (j, row) in rows.iter().enumerate() {
                    if row.len() != n {
                        issues.push(SchemaIssue {
                            path: format!("driver.{name}[{j}]"),
                            message: format!("{} entries for {n} states", row.len()),
                        });
                    }
                }
            }
        }
        match self.driver.kind.as_str() {
            "decoupled" => {}
            "affine" => match self.driver.coupling.as_ref().and_then(|c| c.g.as_ref()) {
                None => issues.push(SchemaIssue {
                    path: "driver.coupling.g".into(),
                    message: "affine kind requires one N x N matrix per state".into(),
                }),
                Some(g) => {
                    if g.len() != n {
                        issues.push(SchemaIssue {
                            path: "driver.coupling.g".into(),
                            message: format!("{} matrices for {n} states", g.len()),
                        });
                    }
                    for (x, m) in g.iter().enumerate() {
                        if m.len() != modes || m.iter().any(|r| r.len() != modes) {
                            issues.push(SchemaIssue {
                                path: format!("driver.coupling.g[{x}]"),
                                message: format!("must be {modes} x {modes}"),
                            });
                        }
                    }
                }
            },
            "smooth-coupled" => {
                let c = self.driver.coupling.as_ref();
                let lambda = c.and_then(|c| c.lambda.as_ref());
                let alpha = c.and_then(|c| c.alpha.as_ref());
                match (lambda, alpha) {
                    (Some(l), Some(a)) => {
                        if l.len() != modes {
                            issues.push(SchemaIssue {
                                path: "driver.coupling.lambda".into(),
                                message: format!("{} entries for {modes} modes", l.len()),
                            });
                        }
                        if a.len() != modes || a.iter().any(|r| r.len() != modes) {
                            issues.push(SchemaIssue {
                                path: "driver.coupling.alpha".into(),
                                message: format!("must be {modes} x {modes}"),
                            });
                        }
                    }
                    _ => issues.push(SchemaIssue {
                        path: "driver.coupling".into(),
                        message: "smooth-coupled kind requires lambda and alpha".into(),
                    }),
                }
            }
            other => issues.push(SchemaIssue {
                path: "driver.kind".into(),
                message: format!(
                    "unknown kind {other:?}; expected decoupled, affine or smooth-coupled"
                ),
            }),
        }

        if self.barrier.adjacency.len() != modes {
            issues.push(SchemaIssue {
                path: "barrier.adjacency".into(),
                message: format!(
                    "{} adjacency rows for {modes} modes",
                    self.barrier.adjacency.len()
                ),
            });
        }
        for (j, adj) in self.barrier.adjacency.iter().enumerate() {
            for (k, &i) in adj.iter().enumerate() {
                if i >= modes {
                    issues.push(SchemaIssue {
                        path: format!("barrier.adjacency[{j}][{k}]"),
                        message: format!("mode {i} of {modes}"),
                    });
                } else if i == j {
                    issues.push(SchemaIssue {
                        path: format!("barrier.adjacency[{j}][{k}]"),
                        message: "self-switch not allowed".into(),
                    });
                }
            }
        }
        if self.barrier.costs.len() != self.barrier.adjacency.len() {
            issues.push(SchemaIssue {
                path: "barrier.costs".into(),
                message: "one cost list per mode required".into(),
            });
        }
        for (j, (costs, adj)) in self
            .barrier
            .costs
            .iter()
            .zip(self.barrier.adjacency.iter())
            .enumerate()
        {
            if costs.len() != adj.len() {
                issues.push(SchemaIssue {
                    path: format!("barrier.costs[{j}]"),
                    message: format!("{} vectors for {} targets", costs.len(), adj.len()),
                });
            }
            for (k, c) in costs.iter().enumerate() {
                if c.len() != n {
                    issues.push(SchemaIssue {
                        path: format!("barrier.costs[{j}][{k}]"),
                        message: format!("{} entries for {n} states", c.len()),
                    });
                }
            }
        }
        match self.barrier.form.as_str() {
            "cost-form" => {}
            "general" => {
                if self.barrier.cap.is_none() {
                    issues.push(SchemaIssue {
                        path: "barrier.cap".into(),
                        message: "general form requires a cap".into(),
                    });
                }
            }
            other => issues.push(SchemaIssue {
                path: "barrier.form".into(),
                message: format!("unknown form {other:?}; expected cost-form or general"),
            }),
        }

        if self.run.x0 >= n.max(1) {
            issues.push(SchemaIssue {
                path: "run.x0".into(),
                message: format!("state {} of {n}", self.run.x0),
            });
        }
        if modes > 0 && self.run.start_mode >= modes {
            issues.push(SchemaIssue {
                path: "run.start_mode".into(),
                message: format!("mode {} of {modes}", self.run.start_mode),
            });
        }
        issues
    }

    /// Builds the validated domain objects.
    pub fn build(&self) -> Result<BuiltInstance, InstanceError> {
        let issues = self.schema_issues();
        if !issues.is_empty() {
            return Err(InstanceError::Schema(issues));
        }
        let spec = match self.chain.family.as_str() {
            "explicit" => GeneratorSpec::Explicit {
                rates: self.chain.rates.clone().unwrap(),
            },
            "drift-diffusion" => GeneratorSpec::DriftDiffusion {
                states: self.chain.states,
                diffusion: self.chain.diffusion.unwrap(),
                drift: self.chain.drift.unwrap_or(0.0),
                killing: self.chain.killing.unwrap(),
                mesh: self.chain.mesh.unwrap_or(1.0),
            },
            _ => GeneratorSpec::JumpKernel {
                states: self.chain.states,
                exponent: self.chain.exponent.unwrap(),
                radius: self.chain.radius.unwrap(),
                killing: self.chain.killing.unwrap(),
                mesh: self.chain.mesh.unwrap_or(1.0),
            },
        };
        let gen = build_generator(&spec, self.chain.labels.clone())?;
        let grid = TimeGrid::new(self.grid.dt, self.grid.steps)?;

        let n = self.chain.states;
        let modes = self.driver.psi.len();
        let psi: Vec<DVector<f64>> = self
            .driver
            .psi
            .iter()
            .map(|r| DVector::from_row_slice(r))
            .collect();
        let mu: Vec<MeasureDensity> = match &self.driver.mu {
            Some(rows) => rows
                .iter()
                .map(|r| MeasureDensity::from_slice(r))
                .collect::<Result<_, _>>()?,
            None => vec![MeasureDensity::zero(n); modes],
        };
        let xi: Vec<DVector<f64>> = match &self.driver.xi {
            Some(rows) => rows.iter().map(|r| DVector::from_row_slice(r)).collect(),
            None => vec![DVector::zeros(n); modes],
        };
        let coupling = match self.driver.kind.as_str() {
            "decoupled" => Coupling::Decoupled,
            "affine" => {
                let g = self
                    .driver
                    .coupling
                    .as_ref()
                    .and_then(|c| c.g.as_ref())
                    .unwrap();
                Coupling::Affine {
                    g: g.iter()
                        .map(|m| DMatrix::from_fn(modes, modes, |j, i| m[j][i]))
                        .collect(),
                }
            }
            _ => {
                let c = self.driver.coupling.as_ref().unwrap();
                Coupling::SmoothCoupled {
                    lambda: c.lambda.clone().unwrap(),
                    alpha: {
                        let a = c.alpha.as_ref().unwrap();
                        DMatrix::from_fn(modes, modes, |j, i| a[j][i])
                    },
                }
            }
        };
        let drv = DriverSystem::new(psi, coupling, mu, xi)?;

        let form = match self.barrier.form.as_str() {
            "cost-form" => BarrierForm::CostForm,
            _ => BarrierForm::General {
                cap: self.barrier.cap.unwrap(),
            },
        };
        let costs: Vec<Vec<DVector<f64>>> = self
            .barrier
            .costs
            .iter()
            .map(|row| row.iter().map(|c| DVector::from_row_slice(c)).collect())
            .collect();
        let bar = BarrierSystem::new(
            n,
            self.barrier.adjacency.clone(),
            costs,
            form,
            self.barrier.cost_floor,
        )?;
        Ok(BuiltInstance {
            gen,
            grid,
            drv,
            bar,
            run: self.run.clone(),
        })
    }
}
