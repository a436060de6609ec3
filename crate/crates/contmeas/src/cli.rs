//! Argument parsing. Presets (`--figure N`) fill every parameter; flags
//! given alongside a preset override it.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{
    default_dt, figure, strengths, Command, DensityMode, Format, Model, RunConfig, Scheme, DEFAULT_SEED,
};
use crate::ensemble::worker_count;
use crate::output::{read_config, write_report, OutputError};
use crate::run::{execute, RunError};
use contmeas_core::density::DEFAULT_WINDOW_SIGMAS;
use contmeas_core::fock::{DEFAULT_DIM, LEAKAGE_TOL};
use contmeas_core::optimal_path::{globally_most_likely_endpoint, DEFAULT_GRID_POINTS};
use contmeas_core::postselect::{DEFAULT_CLUSTER_SIZE, DEFAULT_EPSILON, DEFAULT_MAX_TRIALS, DEFAULT_POOL_SIZE};
use contmeas_core::Vec2;

#[derive(Debug, Parser)]
#[command(name = "contmeas", version, about = "Continuously monitored harmonic oscillator: moments, optimal paths, densities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
    /// Output file (standard output when absent).
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Steady-state covariance and its linear stability.
    FixedPoint(StrengthArgs),
    /// Integrate the covariance equations.
    Covariance(CovarianceArgs),
    /// One trajectory (n = 1) or the final states of an ensemble.
    Simulate(SimulateArgs),
    /// Most likely path between two boundary points.
    Mlp(MlpArgs),
    /// Final-state density, analytic and/or from an ensemble.
    Density(DensityArgs),
    /// Post-select, cluster and average trajectories ending near targets.
    Cluster(ClusterArgs),
    /// Compare the Gaussian moments with a truncated number-basis evolution.
    Oracle(OracleArgs),
    /// Rerun the configuration embedded in an earlier output file.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Default)]
pub struct StrengthArgs {
    /// Position-measurement timescale.
    #[arg(long)]
    pub tau1: Option<f64>,
    /// Momentum-measurement timescale (defaults to tau1).
    #[arg(long, conflicts_with = "position_only")]
    pub tau2: Option<f64>,
    #[arg(long)]
    pub position_only: bool,
}

#[derive(Debug, Args, Default)]
pub struct TimeArgs {
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub tf: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct StateArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub q1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub q2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CovarianceArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=7))]
    pub figure: Option<u8>,
    #[command(flatten)]
    pub strengths: StrengthArgs,
    #[command(flatten)]
    pub time: TimeArgs,
    #[arg(long, allow_negative_numbers = true)]
    pub q3: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub q4: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub q5: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=7))]
    pub figure: Option<u8>,
    #[command(flatten)]
    pub strengths: StrengthArgs,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub state: StateArgs,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Evolve the covariance from the coherent state instead of freezing it
    /// at the fixed point.
    #[arg(long)]
    pub evolving: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MlpArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=7))]
    pub figure: Option<u8>,
    #[command(flatten)]
    pub strengths: StrengthArgs,
    #[arg(long)]
    pub tf: Option<f64>,
    #[command(flatten)]
    pub state: StateArgs,
    #[arg(long, allow_negative_numbers = true)]
    pub qf1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub qf2: Option<f64>,
    /// Grid points on [0, tf].
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=7))]
    pub figure: Option<u8>,
    #[command(flatten)]
    pub strengths: StrengthArgs,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub state: StateArgs,
    #[arg(long, value_enum)]
    pub mode: Option<DensityMode>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Bins per axis.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Window half-width in standard deviations.
    #[arg(long)]
    pub sigmas: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=7))]
    pub figure: Option<u8>,
    #[command(flatten)]
    pub strengths: StrengthArgs,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub state: StateArgs,
    /// Endpoint `q1,q2`; repeatable. Defaults to the most likely endpoint.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    pub target: Vec<[f64; 2]>,
    /// Half-width of the acceptance box.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub cluster_size: Option<usize>,
    #[arg(long)]
    pub max_trials: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub strengths: StrengthArgs,
    #[command(flatten)]
    pub time: TimeArgs,
    #[command(flatten)]
    pub state: StateArgs,
    /// Number-basis truncation.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,
    /// Keep every k-th grid point in the output.
    #[arg(long)]
    pub record_every: Option<usize>,
    /// Largest tolerated population of the top five levels.
    #[arg(long)]
    pub leakage_tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Output file whose metadata holds the configuration.
    pub from: PathBuf,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `q1,q2`, got `{s}`"))?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    Ok([p(a)?, p(b)?])
}

fn preset(n: Option<u8>, name: &str) -> Result<Option<Command>, RunError> {
    let Some(n) = n else { return Ok(None) };
    let cmd = figure(n).ok_or_else(|| RunError::Usage(format!("no preset for figure {n}")))?;
    if cmd.name() != name {
        return Err(RunError::Usage(format!("figure {n} is a `{}` preset, not `{name}`", cmd.name())));
    }
    Ok(Some(cmd))
}

fn preset_model(cmd: &Option<Command>) -> Option<Model> {
    match cmd.as_ref()? {
        Command::Covariance { model, .. }
        | Command::Simulate { model, .. }
        | Command::Mlp { model, .. }
        | Command::Density { model, .. }
        | Command::Cluster { model, .. }
        | Command::Oracle { model, .. } => Some(*model),
        Command::FixedPoint { .. } => None,
    }
}

fn resolve_strengths(a: &StrengthArgs, base: Option<&Model>) -> (f64, Option<f64>) {
    let tau1 = a.tau1.or(base.map(|m| m.tau1)).unwrap_or(1.0);
    let tau2 = if a.position_only {
        None
    } else if let Some(t) = a.tau2 {
        Some(t)
    } else if let Some(m) = base {
        m.tau2
    } else {
        Some(tau1)
    };
    (tau1, tau2)
}

fn resolve_model(
    name: &str,
    a: &StrengthArgs,
    dt: Option<f64>,
    tf: Option<f64>,
    base: Option<&Model>,
    default_tf: f64,
) -> Result<Model, RunError> {
    let (tau1, tau2) = resolve_strengths(a, base);
    let s = strengths(tau1, tau2).map_err(|e| RunError::Usage(e.to_string()))?;
    let dt = dt.unwrap_or_else(|| default_dt(name, &s));
    Ok(Model { tau1, tau2, dt, tf: tf.or(base.map(|m| m.tf)).unwrap_or(default_tf) })
}

fn state(a: &StateArgs, base: [f64; 2]) -> [f64; 2] {
    [a.q1.unwrap_or(base[0]), a.q2.unwrap_or(base[1])]
}

/// Turns parsed arguments into a complete configuration.
pub fn resolve(cli: Cli) -> Result<RunConfig, RunError> {
    let command = match cli.command {
        Sub::Replay(r) => {
            let mut cfg = read_config(&r.from)?;
            cfg.output = cli.output;
            if let Some(f) = cli.format {
                cfg.format = f;
            }
            return Ok(cfg);
        }
        Sub::FixedPoint(a) => {
            let (tau1, tau2) = resolve_strengths(&a, None);
            Command::FixedPoint { tau1, tau2 }
        }
        Sub::Covariance(a) => {
            let p = preset(a.figure, "covariance")?;
            let base = preset_model(&p);
            let model = resolve_model("covariance", &a.strengths, a.time.dt, a.time.tf, base.as_ref(), 20.0)?;
            let init = match p {
                Some(Command::Covariance { init, .. }) => init,
                _ => [2.5, 1.0, 5.5],
            };
            Command::Covariance {
                model,
                init: [a.q3.unwrap_or(init[0]), a.q4.unwrap_or(init[1]), a.q5.unwrap_or(init[2])],
            }
        }
        Sub::Simulate(a) => {
            let p = preset(a.figure, "simulate")?;
            let model = resolve_model("simulate", &a.strengths, a.time.dt, a.time.tf, preset_model(&p).as_ref(), 10.0)?;
            let (qi, n, evolving, seed) = match p {
                Some(Command::Simulate { qi, n, evolving, seed, .. }) => (qi, n, evolving, seed),
                _ => ([3.0, 4.0], 1, false, DEFAULT_SEED),
            };
            Command::Simulate {
                model,
                qi: state(&a.state, qi),
                n: a.n.unwrap_or(n),
                evolving: a.evolving || evolving,
                seed: a.seed.unwrap_or(seed),
            }
        }
        Sub::Mlp(a) => {
            let p = preset(a.figure, "mlp")?;
            let model = resolve_model("mlp", &a.strengths, None, a.tf, preset_model(&p).as_ref(), 10.0)?;
            let (qi, qf, points) = match p {
                Some(Command::Mlp { qi, qf, points, .. }) => (qi, qf, points),
                _ => ([3.0, 4.0], [4.0, 2.0], DEFAULT_GRID_POINTS),
            };
            Command::Mlp {
                model,
                qi: state(&a.state, qi),
                qf: [a.qf1.unwrap_or(qf[0]), a.qf2.unwrap_or(qf[1])],
                points: a.points.unwrap_or(points),
            }
        }
        Sub::Density(a) => {
            let p = preset(a.figure, "density")?;
            let model = resolve_model("density", &a.strengths, a.time.dt, a.time.tf, preset_model(&p).as_ref(), 10.0)?;
            let (qi, mode, n, bins, sigmas, seed) = match p {
                Some(Command::Density { qi, mode, n, bins, sigmas, seed, .. }) => (qi, mode, n, bins, sigmas, seed),
                _ => ([3.0, 4.0], DensityMode::Both, 100_000, 61, DEFAULT_WINDOW_SIGMAS, DEFAULT_SEED),
            };
            Command::Density {
                model,
                qi: state(&a.state, qi),
                mode: a.mode.unwrap_or(mode),
                n: a.n.unwrap_or(n),
                bins: a.bins.unwrap_or(bins),
                sigmas: a.sigmas.unwrap_or(sigmas),
                seed: a.seed.unwrap_or(seed),
            }
        }
        Sub::Cluster(a) => {
            let p = preset(a.figure, "cluster")?;
            let model = resolve_model("cluster", &a.strengths, a.time.dt, a.time.tf, preset_model(&p).as_ref(), 5.0)?;
            let (qi, targets, epsilon, pool, cluster_size, max_trials, seed) = match p {
                Some(Command::Cluster { qi, targets, epsilon, pool, cluster_size, max_trials, seed, .. }) => {
                    (qi, targets, epsilon, pool, cluster_size, max_trials, seed)
                }
                _ => ([3.0, 4.0], Vec::new(), DEFAULT_EPSILON, DEFAULT_POOL_SIZE, DEFAULT_CLUSTER_SIZE, DEFAULT_MAX_TRIALS, DEFAULT_SEED),
            };
            let qi = state(&a.state, qi);
            let targets = if !a.target.is_empty() {
                a.target
            } else if !targets.is_empty() {
                targets
            } else {
                let q = globally_most_likely_endpoint(Vec2::new(qi[0], qi[1]), model.tf);
                vec![[q[0], q[1]]]
            };
            Command::Cluster {
                model,
                qi,
                targets,
                epsilon: a.epsilon.unwrap_or(epsilon),
                pool: a.pool.unwrap_or(pool),
                cluster_size: a.cluster_size.unwrap_or(cluster_size),
                max_trials: a.max_trials.unwrap_or(max_trials),
                seed: a.seed.unwrap_or(seed),
            }
        }
        Sub::Oracle(a) => {
            let model = resolve_model("oracle", &a.strengths, a.time.dt, a.time.tf, None, 5.0)?;
            Command::Oracle {
                model,
                qi: state(&a.state, [3.0, 4.0]),
                dim: a.dim.unwrap_or(DEFAULT_DIM),
                scheme: a.scheme.unwrap_or_default(),
                record_every: a.record_every.unwrap_or(100),
                leakage_tol: a.leakage_tol.unwrap_or(LEAKAGE_TOL),
                seed: a.seed.unwrap_or(DEFAULT_SEED),
            }
        }
    };
    let mut cfg = RunConfig::new(command);
    cfg.output = cli.output;
    cfg.format = cli.format.unwrap_or_default();
    Ok(cfg)
}

/// Runs a resolved configuration and writes its output.
pub fn run_config(cfg: &RunConfig) -> Result<(), RunError> {
    let report = execute(cfg, worker_count())?;
    match &cfg.output {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(OutputError::from)?;
            let mut w = std::io::BufWriter::new(file);
            write_report(&mut w, cfg, &report)?;
            w.flush().map_err(OutputError::from)?;
        }
        None => {
            let stdout = std::io::stdout();
            write_report(stdout.lock(), cfg, &report)?;
        }
    }
    Ok(())
}

// A closed downstream pipe (`| head`) is not a failure.
fn is_broken_pipe(e: &OutputError) -> bool {
    let io = match e {
        OutputError::Io(e) => Some(e),
        OutputError::Csv(e) => match e.kind() {
            csv::ErrorKind::Io(e) => Some(e),
            _ => None,
        },
        _ => None,
    };
    io.is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match resolve(cli).and_then(|cfg| run_config(&cfg)) {
        Ok(()) => 0,
        Err(RunError::Output(e)) if is_broken_pipe(&e) => 0,
        Err(e) => {
            eprintln!("contmeas: {e}");
            e.exit_code()
        }
    }
}
