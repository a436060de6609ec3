//! Fully resolved run configuration. It is written verbatim into every
//! output header and can be read back to rerun the command.

use std::path::PathBuf;

use contmeas_core::fock::SmeScheme;
use contmeas_core::gaussian::{default_covariance_dt, default_simulation_dt};
use contmeas_core::postselect::{DEFAULT_CLUSTER_SIZE, DEFAULT_EPSILON, DEFAULT_MAX_TRIALS, DEFAULT_POOL_SIZE};
use contmeas_core::{MeasurementConfig, Strengths};
use serde::{Deserialize, Serialize};

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 20_210_607;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DensityMode {
    Analytic,
    Empirical,
    #[default]
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    #[default]
    Milstein,
}

impl From<Scheme> for SmeScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Euler => SmeScheme::EulerMaruyama,
            Scheme::Milstein => SmeScheme::Milstein,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub tau1: f64,
    /// `None` when only position is monitored.
    pub tau2: Option<f64>,
    pub dt: f64,
    pub tf: f64,
}

impl Model {
    pub fn strengths(&self) -> contmeas_core::Result<Strengths> {
        strengths(self.tau1, self.tau2)
    }

    pub fn measurement(&self) -> contmeas_core::Result<MeasurementConfig> {
        MeasurementConfig::new(self.strengths()?, self.dt, self.tf)
    }
}

pub fn strengths(tau1: f64, tau2: Option<f64>) -> contmeas_core::Result<Strengths> {
    match tau2 {
        Some(t2) => Strengths::general(tau1, t2),
        None => Strengths::position_only(tau1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    FixedPoint {
        tau1: f64,
        tau2: Option<f64>,
    },
    Covariance {
        model: Model,
        init: [f64; 3],
    },
    Simulate {
        model: Model,
        qi: [f64; 2],
        n: usize,
        evolving: bool,
        seed: u64,
    },
    Mlp {
        model: Model,
        qi: [f64; 2],
        qf: [f64; 2],
        points: usize,
    },
    Density {
        model: Model,
        qi: [f64; 2],
        mode: DensityMode,
        n: usize,
        bins: usize,
        sigmas: f64,
        seed: u64,
    },
    Cluster {
        model: Model,
        qi: [f64; 2],
        targets: Vec<[f64; 2]>,
        epsilon: f64,
        pool: usize,
        cluster_size: usize,
        max_trials: u64,
        seed: u64,
    },
    Oracle {
        model: Model,
        qi: [f64; 2],
        dim: usize,
        scheme: Scheme,
        record_every: usize,
        leakage_tol: f64,
        seed: u64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::FixedPoint { .. } => "fixed-point",
            Command::Covariance { .. } => "covariance",
            Command::Simulate { .. } => "simulate",
            Command::Mlp { .. } => "mlp",
            Command::Density { .. } => "density",
            Command::Cluster { .. } => "cluster",
            Command::Oracle { .. } => "oracle",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Simulate { seed, .. }
            | Command::Density { seed, .. }
            | Command::Cluster { seed, .. }
            | Command::Oracle { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub command: Command,
    pub format: Format,
    /// Where this run writes; not part of the recorded parameters.
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self { version: VERSION.to_string(), command, format: Format::Csv, output: None }
    }

    /// Checks every parameter without running anything.
    pub fn validate(&self) -> Result<(), String> {
        let finite = |name: &str, xs: &[f64]| {
            if xs.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(format!("{name} must be finite"))
            }
        };
        let positive = |name: &str, n: usize| if n > 0 { Ok(()) } else { Err(format!("{name} must be at least 1")) };
        let model = |m: &Model| m.measurement().map(|_| ()).map_err(|e| e.to_string());
        match &self.command {
            Command::FixedPoint { tau1, tau2 } => strengths(*tau1, *tau2).map(|_| ()).map_err(|e| e.to_string()),
            Command::Covariance { model: m, init } => {
                model(m)?;
                finite("initial covariance", init)?;
                contmeas_core::Covariance::from_array(*init).validate(1e-9).map_err(|e| e.to_string())
            }
            Command::Simulate { model: m, qi, n, .. } => {
                model(m)?;
                finite("initial state", qi)?;
                positive("n", *n)
            }
            Command::Mlp { model: m, qi, qf, points } => {
                m.strengths().map_err(|e| e.to_string())?;
                finite("boundary conditions", &[qi[0], qi[1], qf[0], qf[1]])?;
                if !(m.tf > 0.0 && m.tf.is_finite()) {
                    return Err(format!("tf must be positive, got {}", m.tf));
                }
                if *points < 2 {
                    return Err("points must be at least 2".into());
                }
                Ok(())
            }
            Command::Density { model: m, qi, mode, n, bins, sigmas, .. } => {
                model(m)?;
                finite("initial state", qi)?;
                positive("bins", *bins)?;
                if *mode != DensityMode::Analytic {
                    positive("n", *n)?;
                }
                if !(*sigmas > 0.0 && sigmas.is_finite()) {
                    return Err(format!("sigmas must be positive, got {sigmas}"));
                }
                Ok(())
            }
            Command::Cluster { model: m, qi, targets, epsilon, pool, cluster_size, .. } => {
                model(m)?;
                finite("initial state", qi)?;
                if targets.is_empty() {
                    return Err("at least one target is required".into());
                }
                for t in targets {
                    finite("target", t)?;
                }
                let mut spec = contmeas_core::postselect::ClusterSpec::new(contmeas_core::Vec2::new(0.0, 0.0));
                spec.epsilon = *epsilon;
                spec.pool_size = *pool;
                spec.cluster_size = *cluster_size;
                spec.validate().map_err(|e| e.to_string())
            }
            Command::Oracle { model: m, qi, dim, record_every, leakage_tol, .. } => {
                model(m)?;
                finite("initial state", qi)?;
                positive("record-every", *record_every)?;
                if !(*leakage_tol > 0.0) {
                    return Err(format!("leakage tolerance must be positive, got {leakage_tol}"));
                }
                contmeas_core::fock::coherent_init(qi[0], qi[1], *dim).map(|_| ()).map_err(|e| e.to_string())
            }
        }
    }
}

/// Default time step for a command: covariance integration resolves the
/// fastest decay, the oracle uses `1e-4`, everything else the simulation step.
pub fn default_dt(command: &str, s: &Strengths) -> f64 {
    match command {
        "covariance" => default_covariance_dt(s),
        "oracle" => 1e-4,
        _ => default_simulation_dt(s),
    }
}

fn model(tau1: f64, tau2: Option<f64>, tf: f64, command: &str) -> Model {
    let s = strengths(tau1, tau2).expect("preset strengths are valid");
    Model { tau1, tau2, dt: default_dt(command, &s), tf }
}

/// Endpoints of the three clustered paths at `tf = 5` from `(3, 4)`.
pub const FIGURE6_TARGETS: [[f64; 2]; 3] = [[-2.98, 4.01], [-4.00, 4.50], [-2.00, 3.00]];

/// Parameter sets of the figures; `None` for numbers without a preset.
pub fn figure(n: u8) -> Option<Command> {
    Some(match n {
        2 => Command::Covariance { model: model(1.0, Some(1.0), 20.0, "covariance"), init: [2.5, 1.0, 5.5] },
        3 => Command::Simulate {
            model: model(1.0, Some(1.0), 5.0, "simulate"),
            qi: [3.0, 4.0],
            n: 1,
            evolving: false,
            seed: DEFAULT_SEED,
        },
        4 => Command::Density {
            model: model(1.0, Some(1.0), 10.0, "density"),
            qi: [3.0, 4.0],
            mode: DensityMode::Both,
            n: 100_000,
            bins: 61,
            sigmas: contmeas_core::density::DEFAULT_WINDOW_SIGMAS,
            seed: DEFAULT_SEED,
        },
        5 => Command::Mlp {
            model: model(1.0, Some(1.0), 10.0, "mlp"),
            qi: [3.0, 4.0],
            qf: [4.0, 2.0],
            points: contmeas_core::optimal_path::DEFAULT_GRID_POINTS,
        },
        6 => Command::Cluster {
            model: model(1.0, Some(1.0), 5.0, "cluster"),
            qi: [3.0, 4.0],
            targets: FIGURE6_TARGETS.to_vec(),
            epsilon: DEFAULT_EPSILON,
            pool: DEFAULT_POOL_SIZE,
            cluster_size: DEFAULT_CLUSTER_SIZE,
            max_trials: DEFAULT_MAX_TRIALS,
            seed: DEFAULT_SEED,
        },
        7 => Command::Density {
            model: model(0.7, Some(3.0), 8.0, "density"),
            qi: [3.0, 4.0],
            mode: DensityMode::Both,
            n: 100_000,
            bins: 61,
            sigmas: contmeas_core::density::DEFAULT_WINDOW_SIGMAS,
            seed: DEFAULT_SEED,
        },
        _ => return None,
    })
}
