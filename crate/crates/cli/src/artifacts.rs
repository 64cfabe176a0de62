//! Run-directory artifacts: manifest, solution snapshot, and CSV/JSON
//! writers. All floating-point output uses 17 significant digits so
//! repeated runs are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hmfg::equilibrium::SolveReport;
use hmfg::metric::TimeGrid;
use hmfg::model::TruncationGuard;
use hmfg::{EnsembleFlow, EquilibriumSolution, SolveGrids, StateGrid, ValueField};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub fn fmt17(x: f64) -> String {
    format!("{x:.17e}")
}

/// Reproducibility record written into every run directory. Wall times
/// live only here, so the data artifacts stay bit-identical.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub artifacts: Vec<String>,
    pub wall_times_s: BTreeMap<String, f64>,
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    seed: u64,
    artifacts: &[&str],
    wall_times_s: BTreeMap<String, f64>,
) -> Result<()> {
    let manifest = Manifest {
        tool: "hmfg",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        wall_times_s,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("JSON serialization failed")?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Serializable snapshot of an equilibrium solution: the fixed-point
/// flow, the raw value arrays, the iteration report, and the config that
/// produced it (so the problem closures can be rebuilt on load).
#[derive(Debug, Serialize, Deserialize)]
pub struct SavedSolution {
    pub config: RunConfig,
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub rho_star: EnsembleFlow,
    pub u: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub guard_bound: f64,
    pub guard_max_observed: f64,
    pub max_mass_drift: f64,
}

pub fn save_solution(dir: &Path, config: &RunConfig, sol: &EquilibriumSolution) -> Result<()> {
    let k = sol.n_types();
    // The embedded config describes the problem, not the run environment:
    // strip fields that do not affect the solution so the artifact is
    // byte-identical across output locations and worker counts.
    let mut config = config.clone();
    config.output.dir = None;
    config.workers = 0;
    config.log_level = crate::config::default_log_level();
    let saved = SavedSolution {
        config,
        x_min: sol.grids.state.x_min,
        x_max: sol.grids.state.x_max,
        n_x: sol.grids.state.n_x,
        n_t: sol.grids.time.n_t - 1,
        rho_star: sol.rho_star.clone(),
        u: (0..k).map(|l| sol.value.values(l).to_vec()).collect(),
        residuals: sol.report.residuals.clone(),
        contraction_ratios: sol.report.contraction_ratios.clone(),
        converged: sol.report.converged,
        iterations: sol.report.iterations,
        guard_bound: sol.report.guard.m,
        guard_max_observed: sol.report.guard.max_observed,
        max_mass_drift: sol.report.max_mass_drift,
    };
    write_json(&dir.join("solution.json"), &saved)
}

pub fn solution_path(dir: &Path) -> PathBuf {
    dir.join("solution.json")
}

pub fn load_solution(dir: &Path) -> Result<EquilibriumSolution> {
    let path = solution_path(dir);
    let text = std::fs::read_to_string(&path).with_context(|| {
        format!(
            "missing solution artifact {}; run `hmfg solve` first or pass --inline-solve",
            path.display()
        )
    })?;
    let saved: SavedSolution =
        serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    let setup = saved.config.build()?;
    let state = StateGrid::new(saved.x_min, saved.x_max, saved.n_x)?;
    let time = TimeGrid::new(0.0, setup.problem.horizon, saved.n_t + 1)?;
    let grids = SolveGrids::new(state, time);
    let value = ValueField::new(grids, saved.u)?;
    let mut guard = TruncationGuard::new(saved.guard_bound)?;
    guard.observe(saved.guard_max_observed, 0, 0.0, 0.0);
    Ok(EquilibriumSolution {
        problem: setup.problem,
        grids,
        rho_star: saved.rho_star,
        value,
        report: SolveReport {
            residuals: saved.residuals,
            contraction_ratios: saved.contraction_ratios,
            converged: saved.converged,
            iterations: saved.iterations,
            guard,
            max_mass_drift: saved.max_mass_drift,
            wall_time: 0.0,
        },
    })
}
