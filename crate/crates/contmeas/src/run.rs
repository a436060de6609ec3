//! Executes a resolved [`RunConfig`] and produces its table and summary.

use contmeas_core::covariance::{
    covariance_rhs, determinant_bound_check, integrate_covariance, linearization, quadratic_deviation_bound_check,
};
use contmeas_core::density::{
    analytic_density_general, density_distance, empirical_density, normalization_check, HistogramSpec,
};
use contmeas_core::fock::{run_oracle, OracleConfig};
use contmeas_core::optimal_path::{boundary_determinant, solve_op, uniform_grid, BoundaryConditions};
use contmeas_core::postselect::{cluster_least_distance, compare_to_mlp, ClusterSpec, SimulationSource};
use contmeas_core::trajectory::{simulate_trajectory, CovarianceMode, NoiseMode, SimOptions, StreamId};
use contmeas_core::{fixed_point_covariance, Covariance, GaussianState, Vec2};
use serde_json::{json, Map, Value};

use crate::config::{strengths, Command, DensityMode, RunConfig};
use crate::ensemble::{postselect_pool_par, simulate_ensemble_par};
use crate::output::{OutputError, Report, Table};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] contmeas_core::Error),
    #[error(transparent)]
    Output(#[from] OutputError),
}

impl RunError {
    /// 1 for usage and I/O problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

fn v2(v: Vec2) -> Value {
    json!([v[0], v[1]])
}

fn m2(m: [[f64; 2]; 2]) -> Value {
    json!(m)
}

/// Runs the command; `workers` only affects speed, never the result.
pub fn execute(cfg: &RunConfig, workers: usize) -> Result<Report, RunError> {
    cfg.validate().map_err(RunError::Usage)?;
    let mut summary = Map::new();
    let table = match &cfg.command {
        Command::FixedPoint { tau1, tau2 } => {
            let s = strengths(*tau1, *tau2)?;
            let c = fixed_point_covariance(&s);
            let residual = covariance_rhs(&c, &s).iter().fold(0.0f64, |a, r| a.max(r.abs()));
            let st = linearization(&s);
            let mut t = Table::new(&[
                "q3", "q4", "q5", "det", "max_residual", "lambda1_re", "lambda1_im", "lambda2_re", "lambda2_im",
                "lambda3_re", "lambda3_im",
            ]);
            let mut row = vec![c.q3, c.q4, c.q5, c.det(), residual];
            for l in st.eigenvalues {
                row.extend([l.re, l.im]);
            }
            t.push(row);
            summary.insert("regime".into(), json!(format!("{:?}", s.regime())));
            summary.insert("all_stable".into(), json!(st.all_stable));
            summary.insert("predicted_real_eigenvalue".into(), json!(st.predicted_real_eigenvalue));
            summary.insert("max_eigen_residual".into(), json!(st.max_eigen_residual()));
            t
        }
        Command::Covariance { model, init } => {
            let m = model.measurement()?;
            let s = *m.strengths();
            let traj = integrate_covariance(Covariance::from_array(*init), &m)?;
            let mut t = Table::new(&["tau", "q3", "q4", "q5", "det"]);
            for k in 0..traj.len() {
                let c = traj.values[k];
                t.push(vec![traj.times[k], c.q3, c.q4, c.q5, traj.det[k]]);
            }
            let fixed = fixed_point_covariance(&s);
            let last = *traj.last().expect("non-empty trajectory");
            summary.insert("fixed_point".into(), json!(fixed.as_array()));
            summary.insert("final".into(), json!(last.as_array()));
            let dist = last.as_array().iter().zip(fixed.as_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            summary.insert("final_distance".into(), json!(dist));
            for (name, check) in [
                ("determinant_envelope", determinant_bound_check(&traj, &s)),
                ("deviation_envelope", quadratic_deviation_bound_check(&traj, &s)),
            ] {
                let v = match check {
                    Ok(r) => json!({"ok": true, "worst_margin": r.worst_margin, "worst_tau": r.worst_tau}),
                    Err(e) => json!({"ok": false, "error": e.to_string()}),
                };
                summary.insert(name.into(), v);
            }
            t
        }
        Command::Simulate { model, qi, n, evolving, seed } => {
            let m = model.measurement()?;
            let init = GaussianState::coherent(qi[0], qi[1]);
            let opts = SimOptions {
                covariance: if *evolving { CovarianceMode::Evolving } else { CovarianceMode::SteadyState },
                noise: NoiseMode::Gaussian,
            };
            if *n == 1 {
                let rec = simulate_trajectory(&init, &m, opts, *seed, 0)?;
                let mut t = Table::new(&["tau", "q1", "q2", "r1", "r2", "E_M"]);
                let steps = rec.steps();
                for k in 0..=steps {
                    let r1 = if k < steps { rec.r1[k] } else { f64::NAN };
                    let r2 = match (&rec.r2, k < steps) {
                        (Some(r2), true) => r2[k],
                        _ => f64::NAN,
                    };
                    t.push(vec![rec.times[k], rec.q1[k], rec.q2[k], r1, r2, rec.energy[k]]);
                }
                summary.insert("stream".into(), json!({"master_seed": seed, "index": 0}));
                t
            } else {
                let ens = simulate_ensemble_par(&init, &m, opts, *n, *seed, false, workers)?;
                let mut t = Table::new(&["index", "q1f", "q2f"]);
                for (i, f) in ens.finals.iter().enumerate() {
                    t.push(vec![i as f64, f[0], f[1]]);
                }
                summary.insert("mean".into(), json!(ens.mean()));
                summary.insert("covariance".into(), m2(ens.covariance()));
                if !*evolving {
                    let ana = analytic_density_general(Vec2::new(qi[0], qi[1]), model.tf, m.strengths())?;
                    let c = ana.covariance();
                    summary.insert("analytic_center".into(), v2(ana.center));
                    summary.insert("analytic_covariance".into(), json!([[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]));
                }
                t
            }
        }
        Command::Mlp { model, qi, qf, points } => {
            let s = model.strengths()?;
            let bc = BoundaryConditions::new(Vec2::new(qi[0], qi[1]), Vec2::new(qf[0], qf[1]), model.tf)?;
            let sol = solve_op(&bc, &s)?;
            let grid = uniform_grid(model.tf, *points);
            let p = sol.sample(&grid)?;
            let mut t = Table::new(&["tau", "q1", "q2", "p1", "p2", "r1", "r2", "E_M"]);
            for k in 0..p.tau.len() {
                let r2 = p.r2.as_ref().map_or(f64::NAN, |r| r[k]);
                t.push(vec![p.tau[k], p.q1[k], p.q2[k], p.p1[k], p.p2[k], p.r1[k], r2, p.energy[k]]);
            }
            summary.insert("stochastic_energy".into(), json!(p.stochastic_energy));
            summary.insert("alpha".into(), v2(sol.alpha));
            summary.insert("log_weight".into(), json!(sol.log_weight()));
            summary.insert("boundary_determinant".into(), json!(boundary_determinant(&sol.diffusion, model.tf)));
            summary.insert("hamilton_residual".into(), json!(sol.hamilton_residual(&grid[2..grid.len().saturating_sub(2)])));
            t
        }
        Command::Density { model, qi, mode, n, bins, sigmas, seed } => {
            let m = model.measurement()?;
            let qi_v = Vec2::new(qi[0], qi[1]);
            let ana = analytic_density_general(qi_v, model.tf, m.strengths())?;
            let window = ana.window(*sigmas);
            let spec = HistogramSpec { bins_x: *bins, bins_y: *bins };
            let c = ana.covariance();
            summary.insert("analytic_center".into(), v2(ana.center));
            summary.insert("analytic_covariance".into(), json!([[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]));
            summary.insert("normalization".into(), json!(normalization_check(&ana)));
            let emp = if *mode == DensityMode::Analytic {
                None
            } else {
                let init = GaussianState::coherent(qi[0], qi[1]);
                let ens = simulate_ensemble_par(&init, &m, SimOptions::default(), *n, *seed, false, workers)?;
                let emp = empirical_density(&ens.finals, window, spec)?;
                let cmp = density_distance(&emp, &ana, 100.0);
                summary.insert("empirical_mean".into(), json!(ens.mean()));
                summary.insert("empirical_covariance".into(), m2(ens.covariance()));
                summary.insert("tv_distance".into(), json!(cmp.tv_distance));
                summary.insert("tv_noise_floor".into(), json!(cmp.tv_noise_floor));
                summary.insert("tv_excess".into(), json!(cmp.tv_excess()));
                summary.insert("max_abs_z".into(), json!(cmp.max_abs_z));
                summary.insert("bins_tested".into(), json!(cmp.bins_tested));
                Some(emp)
            };
            let mut t = Table::new(&["q1f", "q2f", "P_analytic", "P_empirical"]);
            let wx = (window.x.1 - window.x.0) / *bins as f64;
            let wy = (window.y.1 - window.y.0) / *bins as f64;
            for i in 0..*bins {
                for j in 0..*bins {
                    let q = Vec2::new(window.x.0 + (i as f64 + 0.5) * wx, window.y.0 + (j as f64 + 0.5) * wy);
                    let pa = if *mode == DensityMode::Empirical { f64::NAN } else { ana.pdf(q) };
                    let pe = emp.as_ref().map_or(f64::NAN, |e| e.value(i, j));
                    t.push(vec![q[0], q[1], pa, pe]);
                }
            }
            t
        }
        Command::Cluster { model, qi, targets, epsilon, pool, cluster_size, max_trials, seed } => {
            let m = model.measurement()?;
            let s = *m.strengths();
            let source = SimulationSource {
                init: GaussianState::coherent(qi[0], qi[1]),
                cfg: m,
                options: SimOptions::default(),
                master_seed: *seed,
            };
            let mut t = Table::new(&["target", "tau", "q1", "q2", "spread", "q1_mlp", "q2_mlp"]);
            let mut per_target = Vec::new();
            for (k, target) in targets.iter().enumerate() {
                let spec = ClusterSpec {
                    target: Vec2::new(target[0], target[1]),
                    epsilon: *epsilon,
                    pool_size: *pool,
                    cluster_size: *cluster_size,
                    max_trials: *max_trials,
                };
                let pool = postselect_pool_par(&source, &spec, workers)?;
                let path = cluster_least_distance(&pool, &spec)?;
                let bc = BoundaryConditions::new(Vec2::new(qi[0], qi[1]), spec.target, model.tf)?;
                let mlp = solve_op(&bc, &s)?;
                let cmp = compare_to_mlp(&path, &mlp)?;
                for (i, &tau) in path.times.iter().enumerate() {
                    let q = mlp.q_unchecked(tau.min(model.tf));
                    t.push(vec![k as f64, tau, path.q1[i], path.q2[i], path.spread[i], q[0], q[1]]);
                }
                per_target.push(json!({
                    "target": target,
                    "trials": pool.trials,
                    "acceptance_rate": pool.acceptance_rate(),
                    "members": path.members,
                    "objective": path.objective,
                    "rms": cmp.rms,
                    "rms_q1": cmp.rms_q1,
                    "rms_q2": cmp.rms_q2,
                    "max_q1": cmp.max_q1,
                    "max_q2": cmp.max_q2,
                }));
            }
            summary.insert("targets".into(), Value::Array(per_target));
            t
        }
        Command::Oracle { model, qi, dim, scheme, record_every, leakage_tol, seed } => {
            let s = model.strengths()?;
            let mut oc = OracleConfig::new(qi[0], qi[1], s, model.dt, model.tf);
            oc.dim = *dim;
            oc.scheme = (*scheme).into();
            oc.stream = StreamId { master_seed: *seed, index: 0 };
            oc.record_every = *record_every;
            oc.leakage_tol = *leakage_tol;
            let r = run_oracle(&oc)?;
            let mut t = Table::new(&[
                "tau", "g_q1", "g_q2", "g_q3", "g_q4", "g_q5", "f_q1", "f_q2", "f_q3", "f_q4", "f_q5",
            ]);
            for k in 0..r.times.len() {
                let mut row = vec![r.times[k]];
                row.extend(r.gaussian[k]);
                row.extend(r.fock[k]);
                t.push(row);
            }
            summary.insert("max_deviation".into(), json!(r.max_deviation));
            summary.insert("max_mean_deviation".into(), json!(r.max_mean_deviation()));
            summary.insert("max_covariance_deviation".into(), json!(r.max_covariance_deviation()));
            summary.insert("min_purity".into(), json!(r.min_purity));
            summary.insert("max_top_population".into(), json!(r.max_top_population));
            t
        }
    };
    Ok(Report { table, summary })
}
