//! Run configuration: sectioned key-value text files (TOML) with sections
//! `[model]`, `[cost]`, `[noise]`, `[grid]`, `[solver]`, `[mc]`, plus the
//! canonical parameter hash embedded in every artifact.

use crate::model::{CostModel, ModelError, ModelParams, NoiseModel};
use crate::solver::{GridSpec, SolveSettings};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub q_matrix: Vec<Vec<f64>>,
    pub horizon: f64,
    pub risk_aversion: f64,
    pub pi_lo: f64,
    pub pi_hi: f64,
    pub p0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Base fee k0 (wealth units).
    pub base_fee: f64,
    /// Quality slope k1 (wealth units).
    pub quality_slope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub std_dev: f64,
    #[serde(default = "default_n_quad")]
    pub n_quad: usize,
}

fn default_n_quad() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_t: usize,
    pub n_w: usize,
    pub n_p: usize,
    pub w_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Number of quality points scanned on [0, chi] per node.
    #[serde(default = "default_n_q")]
    pub n_q: usize,
    /// Obstacle sweep convergence tolerance.
    #[serde(default = "default_obstacle_tol")]
    pub obstacle_tol: f64,
    /// Fraction of the stable explicit step actually used (CFL safety).
    #[serde(default = "default_cfl_safety")]
    pub cfl_safety: f64,
    /// Gap threshold separating PURCHASE from CONTINUE nodes.
    /// Defaults to 10 * obstacle_tol.
    #[serde(default)]
    pub region_tol: Option<f64>,
}

fn default_n_q() -> usize {
    41
}
fn default_obstacle_tol() -> f64 {
    1e-9
}
fn default_cfl_safety() -> f64 {
    0.9
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            n_q: default_n_q(),
            obstacle_tol: default_obstacle_tol(),
            cfl_safety: default_cfl_safety(),
            region_tol: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Initial wealth of simulated paths.
    pub w0: f64,
    /// Record every k-th step in exported path CSVs.
    #[serde(default = "default_record_stride")]
    pub record_stride: usize,
    /// Number of paths exported step-by-step to paths.csv.
    #[serde(default = "default_csv_paths")]
    pub csv_paths: usize,
    /// Discretization allowance constant for PDE-vs-MC and martingale
    /// verdicts; calibrated once on the Merton-degenerate model.
    #[serde(default = "default_allowance_c")]
    pub allowance_c: f64,
}

fn default_record_stride() -> usize {
    1
}
fn default_csv_paths() -> usize {
    4
}
fn default_allowance_c() -> f64 {
    2.0
}

/// Full parsed run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub cost: CostSection,
    pub noise: NoiseSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub mc: McSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn build_params(&self) -> Result<ModelParams, ConfigError> {
        let n = self.model.mu.len();
        let mut q = Vec::with_capacity(n * n);
        for row in &self.model.q_matrix {
            if row.len() != n {
                return Err(ConfigError::Schema(format!(
                    "q_matrix rows must have {n} entries, got {}",
                    row.len()
                )));
            }
            q.extend_from_slice(row);
        }
        Ok(ModelParams::new(
            self.model.mu.clone(),
            self.model.sigma,
            q,
            self.model.horizon,
            self.model.risk_aversion,
            self.model.pi_lo,
            self.model.pi_hi,
            self.model.p0.clone(),
        )?)
    }

    pub fn build_cost(&self) -> Result<CostModel, ConfigError> {
        Ok(CostModel::new(self.cost.base_fee, self.cost.quality_slope)?)
    }

    pub fn build_noise(&self) -> Result<NoiseModel, ConfigError> {
        Ok(NoiseModel::new(self.noise.std_dev, self.noise.n_quad)?)
    }

    pub fn build_grid(&self) -> Result<GridSpec, ConfigError> {
        GridSpec::new(
            self.grid.n_t,
            self.grid.n_w,
            self.grid.n_p,
            self.model.horizon,
            self.grid.w_max,
        )
        .map_err(|e| ConfigError::Schema(e.to_string()))
    }

    pub fn build_solve_settings(&self) -> SolveSettings {
        SolveSettings {
            n_q: self.solver.n_q,
            obstacle_tol: self.solver.obstacle_tol,
            cfl_safety: self.solver.cfl_safety,
            region_tol: self.solver.region_tol.unwrap_or(10.0 * self.solver.obstacle_tol),
        }
    }

    /// Canonical hash over everything that determines the solve artifacts
    /// (model, cost, noise, grid, solver sections). MC settings are
    /// excluded so that re-simulating with a different path budget does
    /// not orphan solved grids.
    pub fn params_hash(&self) -> String {
        #[derive(Serialize)]
        struct SolveRelevant<'a> {
            model: &'a ModelSection,
            cost: &'a CostSection,
            noise: &'a NoiseSection,
            grid: &'a GridSection,
            solver: &'a SolverSection,
        }
        let canon = toml::to_string(&SolveRelevant {
            model: &self.model,
            cost: &self.cost,
            noise: &self.noise,
            grid: &self.grid,
            solver: &self.solver,
        })
        .expect("canonical serialization cannot fail");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

/// FNV-1a 64-bit; an integrity tag for artifact/config pairing, not a
/// cryptographic hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
