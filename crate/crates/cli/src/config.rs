//! Run configuration: TOML file + flag overrides, merged into one
//! effective config that is echoed into every run manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hmfg::metric::TimeGrid;
use hmfg::{FixedPointConfig, HmfgProblem, LqBenchmark, MeasureEnsemble, SolveGrids, StateGrid};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub fixed_point: FixedPointSection,
    #[serde(default)]
    pub nplayer: NPlayerSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Top-level seed for every random substream. Defaults to a recorded
    /// random value, echoed in the manifest.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Worker thread cap; 0 = available parallelism.
    #[serde(default)]
    pub workers: usize,
}

pub(crate) fn default_log_level() -> String {
    "info".to_string()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemConfig::default(),
            grid: GridConfig::default(),
            fixed_point: FixedPointSection::default(),
            nplayer: NPlayerSection::default(),
            output: OutputSection::default(),
            seed: None,
            log_level: default_log_level(),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Built-in benchmark name; currently `lq-k4` (and its `-decoupled`
    /// variant). Explicit fields below override its parameters.
    #[serde(default)]
    pub benchmark: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub decoupled: bool,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { benchmark: Some("lq-k4".to_string()), k: None, horizon: None, decoupled: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_n_x")]
    pub n_x: usize,
    /// Number of time steps (nodes = n_t + 1).
    #[serde(default = "default_n_t")]
    pub n_t: usize,
    #[serde(default)]
    pub x_min: Option<f64>,
    #[serde(default)]
    pub x_max: Option<f64>,
}

fn default_n_x() -> usize {
    401
}
fn default_n_t() -> usize {
    400
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n_x: default_n_x(), n_t: default_n_t(), x_min: None, x_max: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub split_horizon: bool,
    #[serde(default)]
    pub window: Option<f64>,
}

fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    60
}
fn default_damping() -> f64 {
    1.0
}

impl Default for FixedPointSection {
    fn default() -> Self {
        FixedPointSection {
            tol: default_tol(),
            max_iter: default_max_iter(),
            damping: default_damping(),
            split_horizon: false,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NPlayerSection {
    /// Explicit cluster sizes; alternative to `n` (split evenly).
    #[serde(default)]
    pub clusters: Option<Vec<usize>>,
    /// Total player count, split evenly over the K types.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_sim_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Player counts for the `chaos` ladder.
    #[serde(default)]
    pub ladder: Option<Vec<usize>>,
}

fn default_sim_dt() -> f64 {
    5e-3
}
fn default_paths() -> usize {
    20
}

impl Default for NPlayerSection {
    fn default() -> Self {
        NPlayerSection {
            clusters: None,
            n: None,
            dt: default_sim_dt(),
            paths: default_paths(),
            ladder: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        Ok(cfg)
    }

    /// Fill in the seed from system entropy if none was configured; the
    /// chosen value is recorded in the config echo.
    pub fn resolve_seed(&mut self) -> u64 {
        match self.seed {
            Some(s) => s,
            None => {
                let nanos = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0);
                let seed = nanos ^ (std::process::id() as u64).rotate_left(32);
                self.seed = Some(seed);
                seed
            }
        }
    }

    /// Instantiate the benchmark, solver grids, problem and initial
    /// ensemble described by this config.
    pub fn build(&self) -> Result<ProblemSetup> {
        let (mut k, mut horizon, mut decoupled) = (None, None, self.problem.decoupled);
        if let Some(name) = &self.problem.benchmark {
            match name.as_str() {
                "lq-k4" => {
                    k = Some(4);
                    horizon = Some(0.5);
                }
                "lq-k4-decoupled" => {
                    k = Some(4);
                    horizon = Some(0.5);
                    decoupled = true;
                }
                other => bail!("unknown benchmark {other:?}; available: lq-k4, lq-k4-decoupled"),
            }
        }
        let k = self.problem.k.or(k).context("problem.k (or a benchmark name) is required")?;
        let horizon = self
            .problem
            .horizon
            .or(horizon)
            .context("problem.horizon (or a benchmark name) is required")?;
        let bench = if decoupled {
            LqBenchmark::decoupled(k, horizon)
        } else {
            LqBenchmark::standard(k, horizon)
        }
        .map_err(anyhow::Error::from)?;

        let mut state = bench.default_grid(self.grid.n_x).map_err(anyhow::Error::from)?;
        if self.grid.x_min.is_some() || self.grid.x_max.is_some() {
            let x_min = self.grid.x_min.unwrap_or(state.x_min);
            let x_max = self.grid.x_max.unwrap_or(state.x_max);
            state = StateGrid::new(x_min, x_max, self.grid.n_x).map_err(anyhow::Error::from)?;
        }
        let time =
            TimeGrid::new(0.0, horizon, self.grid.n_t + 1).map_err(anyhow::Error::from)?;
        let grids = SolveGrids::new(state, time);
        let x_bound = state.x_min.abs().max(state.x_max.abs());
        let problem = bench.problem(x_bound).map_err(anyhow::Error::from)?;
        let mu0 = bench.initial_ensemble(state).map_err(anyhow::Error::from)?;
        Ok(ProblemSetup { bench, grids, problem, mu0 })
    }

    pub fn fixed_point(&self) -> Result<FixedPointConfig> {
        let fp = &self.fixed_point;
        let mut cfg = FixedPointConfig::new(fp.tol, fp.max_iter, fp.damping)
            .map_err(anyhow::Error::from)?;
        cfg.split_horizon = fp.split_horizon;
        cfg.delta0_hint = fp.window;
        cfg.validate().map_err(anyhow::Error::from)?;
        Ok(cfg)
    }

    /// Cluster sizes for a given total player count, split evenly.
    pub fn clusters_for(&self, k: usize, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n % k != 0 {
            bail!("player count {n} must be a positive multiple of K = {k}");
        }
        Ok(vec![n / k; k])
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.output
            .dir
            .clone()
            .context("output.dir (or --out) is required for this command")
    }
}

/// Everything needed to run the solver, built from one config.
pub struct ProblemSetup {
    pub bench: LqBenchmark,
    pub grids: SolveGrids,
    pub problem: HmfgProblem,
    pub mu0: MeasureEnsemble,
}
