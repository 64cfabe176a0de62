//! `hmfg` — command-line surface for the heterogeneous mean-field-game
//! solver: equilibrium solves, finite-player Monte-Carlo experiments, and
//! the analysis check suites.
//!
//! Exit codes: 0 success, 1 error, 2 non-convergence.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hmfg", version, about = "Heterogeneous mean field game solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in benchmark name (lq-k4, lq-k4-decoupled).
    #[arg(long)]
    benchmark: Option<String>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed; random (and echoed) if omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap; 0 = available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Log level: error, warn, info, debug, trace.
    #[arg(long)]
    log_level: Option<String>,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// State-grid node count.
    #[arg(long)]
    n_x: Option<usize>,
    /// Time step count.
    #[arg(long)]
    n_t: Option<usize>,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Fixed-point residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Picard damping in (0, 1].
    #[arg(long)]
    damping: Option<f64>,
    /// Solve through node-aligned horizon windows.
    #[arg(long)]
    split_horizon: bool,
}

#[derive(Args, Clone)]
struct PlayerArgs {
    /// Directory holding a previous `solve` run's solution.json.
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Solve the equilibrium in-line instead of loading an artifact.
    #[arg(long)]
    inline_solve: bool,
    /// Total player count (split evenly over the types).
    #[arg(long)]
    n: Option<usize>,
    /// Explicit cluster sizes, e.g. 10,10,10,10.
    #[arg(long, value_delimiter = ',')]
    clusters: Option<Vec<usize>>,
    /// Simulation time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Independent replications.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args, Clone)]
struct ChaosArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    player: PlayerArgs,
    /// Player counts of the ladder, e.g. 40,160,640.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<usize>>,
}

#[derive(Args, Clone)]
struct ItoArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Particles per type cloud.
    #[arg(long, default_value_t = 100_000)]
    particles: usize,
    /// Euler time step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Simulated horizon.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Independent seeds.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
}

#[derive(Args, Clone)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random sample points for the difference-quotient audit.
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the mean-field equilibrium and write flow/value artifacts.
    Solve(SolveArgs),
    /// Simulate the lifted strategy in the finite N-player game.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        player: PlayerArgs,
    },
    /// Propagation-of-chaos and exploitability ladder over player counts.
    Chaos(ChaosArgs),
    /// Monte-Carlo verification of the ensemble chain rule.
    ItoCheck(ItoArgs),
    /// Master-equation residual check on the LQ benchmark.
    MasterCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Audit the standing assumptions of the configured problem.
    Validate(ValidateArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Solve(a) => &a.common,
            Command::Simulate { common, .. } => common,
            Command::Chaos(a) => &a.common,
            Command::ItoCheck(a) => &a.common,
            Command::MasterCheck { common } => common,
            Command::Validate(a) => &a.common,
        }
    }
}

fn apply_player_args(config: &mut RunConfig, args: &PlayerArgs) {
    if let Some(c) = &args.clusters {
        config.nplayer.clusters = Some(c.clone());
    }
    if let Some(n) = args.n {
        config.nplayer.n = Some(n);
    }
    if let Some(dt) = args.dt {
        config.nplayer.dt = dt;
    }
    if let Some(p) = args.paths {
        config.nplayer.paths = p;
    }
}

fn build_config(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(b) = &common.benchmark {
        config.problem.benchmark = Some(b.clone());
    }
    if let Some(out) = &common.out {
        config.output.dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    if let Some(level) = &common.log_level {
        config.log_level = level.clone();
    }
    match cmd {
        Command::Solve(args) => {
            if let Some(n_x) = args.grid.n_x {
                config.grid.n_x = n_x;
            }
            if let Some(n_t) = args.grid.n_t {
                config.grid.n_t = n_t;
            }
            if let Some(tol) = args.tol {
                config.fixed_point.tol = tol;
            }
            if let Some(mi) = args.max_iter {
                config.fixed_point.max_iter = mi;
            }
            if let Some(d) = args.damping {
                config.fixed_point.damping = d;
            }
            if args.split_horizon {
                config.fixed_point.split_horizon = true;
            }
        }
        Command::Simulate { player, .. } => apply_player_args(&mut config, player),
        Command::Chaos(args) => {
            apply_player_args(&mut config, &args.player);
            if let Some(l) = &args.ladder {
                config.nplayer.ladder = Some(l.clone());
            }
        }
        _ => {}
    }
    Ok(config)
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    let mut config = build_config(&cli.command)?;
    let seed = config.resolve_seed();

    env_logger::Builder::new()
        .parse_filters(&config.log_level)
        .try_init()
        .ok();
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot configure worker pool: {e}"))?;
    }
    log::info!(
        "effective config: {}",
        serde_json::to_string(&config).unwrap_or_default()
    );

    match &cli.command {
        Command::Solve(_) => commands::cmd_solve(&config, seed),
        Command::Simulate { player, .. } => commands::cmd_simulate(
            &config,
            seed,
            player.solution.as_deref(),
            player.inline_solve,
        ),
        Command::Chaos(args) => commands::cmd_chaos(
            &config,
            seed,
            args.player.solution.as_deref(),
            args.player.inline_solve,
        ),
        Command::ItoCheck(args) => commands::cmd_ito_check(
            &config,
            seed,
            args.particles,
            args.dt,
            args.horizon,
            args.seeds,
        ),
        Command::MasterCheck { .. } => commands::cmd_master_check(&config, seed),
        Command::Validate(args) => commands::cmd_validate(&config, seed, args.samples),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
