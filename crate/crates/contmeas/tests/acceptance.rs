//! Acceptance checks. Prints one PASS/FAIL line per check and always exits
//! zero; failures are meant to be read, not to break the build.

use std::time::Instant;

use contmeas::config::{figure, Command, DEFAULT_SEED, FIGURE6_TARGETS};
use contmeas::ensemble::{postselect_pool_par, simulate_ensemble_par, worker_count};
use contmeas_core::covariance::{covariance_rhs, determinant_bound_check, integrate_covariance};
use contmeas_core::density::{analytic_density_equal, analytic_density_general, density_distance, empirical_density, HistogramSpec};
use contmeas_core::fock::{
    coherent_init, extract_moments, kraus_step, run_oracle, sme_step, KrausOperators, KrausOrder, OracleConfig,
    SmeScheme, DEFAULT_DIM,
};
use contmeas_core::gaussian::{characteristic_function, diffusion_matrices, CharacteristicFunctionParams};
use contmeas_core::optimal_path::{
    boundary_determinant, globally_most_likely_endpoint, solve_op, solve_op_closed_form, solve_op_equal, uniform_grid,
    BoundaryConditions,
};
use contmeas_core::postselect::{
    cluster_from_positions, cluster_least_distance, compare_to_mlp, distance_matrix, ClusterSpec, SimulationSource,
};
use contmeas_core::trajectory::{simulate_trajectory, splitmix64, CovarianceMode, NoiseMode, Readout, SimOptions, StreamId};
use contmeas_core::{fixed_point_covariance, Covariance, GaussianState, MeasurementConfig, Strengths, Vec2};

/// Clustered-path RMS threshold, frozen after one calibration run of the
/// figure-6 preset (worst target 0.168 at the default seed).
const CLUSTER_RMS_THRESHOLD: f64 = 0.20;

/// Averaged max deviation must shrink at least this much when dt halves.
const HALVING_MIN_RATIO: f64 = 1.7;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    fn error(&mut self, id: &str, e: impl std::fmt::Display) {
        self.check(id, false, format!("error: {e}"));
    }
}

fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Uniform draws from a splitmix64 stream.
struct Uniform(u64);

impl Uniform {
    fn next(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (splitmix64(&mut self.0) >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }
}

fn fixed_points(r: &mut Report) {
    let c = fixed_point_covariance(&Strengths::equal(1.0).unwrap());
    r.check("1a fixed point, equal", c.as_array() == [1.0, 0.0, 1.0], format!("{:?}", c.as_array()));
    let s = Strengths::general(0.7, 3.0).unwrap();
    let c = fixed_point_covariance(&s);
    let res = max_abs(covariance_rhs(&c, &s));
    let det = (c.det() - 1.0).abs();
    r.check(
        "1b fixed point, (0.7, 3.0)",
        res < 1e-10 && det < 1e-10,
        format!("{:?}, residual {res:.1e}, |det - 1| {det:.1e}", c.as_array()),
    );
}

fn covariance_convergence(r: &mut Report) {
    let Some(Command::Covariance { model, init }) = figure(2) else { unreachable!() };
    let cfg = model.measurement().unwrap();
    let traj = match integrate_covariance(Covariance::from_array(init), &cfg) {
        Ok(t) => t,
        Err(e) => return r.error("2 covariance convergence", e),
    };
    let last = traj.last().unwrap().as_array();
    let dist = max_abs([last[0] - 1.0, last[1], last[2] - 1.0]);
    let bound = determinant_bound_check(&traj, cfg.strengths());
    let detail = match &bound {
        Ok(b) => format!("|q(20) - (1,0,1)| = {dist:.1e}, envelope margin {:.1e} over {} points", b.worst_margin, b.points),
        Err(e) => format!("|q(20) - (1,0,1)| = {dist:.1e}, {e}"),
    };
    r.check("2 covariance convergence", dist < 1e-6 && bound.is_ok(), detail);
}

fn optimal_paths(r: &mut Report) {
    let mut u = Uniform(7);
    let (mut bc_err, mut ham, mut es, mut min_det) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    let mut failures = 0;
    let n = 10_000;
    for k in 0..n {
        let s = match k % 3 {
            0 => Strengths::equal(u.next(0.3, 3.0)),
            1 => Strengths::general(u.next(0.3, 3.0), u.next(0.3, 3.0)),
            _ => Strengths::position_only(u.next(0.3, 3.0)),
        }
        .unwrap();
        let qi = Vec2::new(u.next(-6.0, 6.0), u.next(-6.0, 6.0));
        let qf = Vec2::new(u.next(-6.0, 6.0), u.next(-6.0, 6.0));
        let tf = u.next(0.5, 20.0);
        let bc = BoundaryConditions::new(qi, qf, tf).unwrap();
        let sol = match solve_op(&bc, &s) {
            Ok(sol) => sol,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        min_det = min_det.min(boundary_determinant(&sol.diffusion, tf));
        bc_err = bc_err.max((sol.q_unchecked(0.0) - qi).amax()).max((sol.q_unchecked(tf) - qf).amax());
        let grid = uniform_grid(tf, 21);
        ham = ham.max(sol.hamilton_residual(&grid[2..19]));
        let e = sol.stochastic_energy();
        for &t in &grid {
            es = es.max((sol.hamiltonian_at(t).unwrap() - e).abs());
        }
        let closed = solve_op_closed_form(&bc, &s).unwrap();
        es = es.max((closed.stochastic_energy() - e).abs());
    }
    let detail = format!(
        "{n} cases, solver failures {failures}, boundary error {bc_err:.1e}, Hamilton residual {ham:.1e}, \
         E_s drift {es:.1e}, min det A {min_det:.2e}"
    );
    r.check("3 optimal-path closed forms", failures == 0 && bc_err < 1e-10 && ham < 1e-7 && es < 1e-8 && min_det > 0.0, detail);
}

fn equal_density(r: &mut Report, workers: usize) {
    let Some(Command::Density { model, qi, n, bins, sigmas, .. }) = figure(4) else { unreachable!() };
    // The default step shows a visible spiral bias in the mean; 1e-4 removes it.
    let cfg = MeasurementConfig::new(model.strengths().unwrap(), 1e-4, model.tf).unwrap();
    let init = GaussianState::coherent(qi[0], qi[1]);
    let start = Instant::now();
    let ens = match simulate_ensemble_par(&init, &cfg, SimOptions::default(), n, DEFAULT_SEED, false, workers) {
        Ok(e) => e,
        Err(e) => return r.error("4 equal-strength density", e),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let ana = analytic_density_equal(Vec2::new(qi[0], qi[1]), model.tf, model.tau1).unwrap();
    let mean = ens.mean();
    let cov = ens.covariance();
    let se = [(cov[0][0] / n as f64).sqrt(), (cov[1][1] / n as f64).sqrt()];
    let z = [(mean[0] - ana.center[0]) / se[0], (mean[1] - ana.center[1]) / se[1]];
    r.check(
        "4a mean",
        z[0].abs() < 3.0 && z[1].abs() < 3.0,
        format!(
            "({:.4}, {:.4}) vs ({:.3}, {:.3}), {:.2} and {:.2} standard errors, dt 1e-4, {elapsed:.0} s",
            mean[0], mean[1], ana.center[0], ana.center[1], z[0], z[1]
        ),
    );
    let v = ana.covariance();
    let rel = [cov[0][0] / v[(0, 0)] - 1.0, cov[1][1] / v[(1, 1)] - 1.0];
    r.check(
        "4b variance",
        rel[0].abs() < 0.03 && rel[1].abs() < 0.03,
        format!("({:.4}, {:.4}) vs {:.4}, relative {:+.2}% and {:+.2}%", cov[0][0], cov[1][1], v[(0, 0)], 100.0 * rel[0], 100.0 * rel[1]),
    );
    let emp = empirical_density(&ens.finals, ana.window(sigmas), HistogramSpec { bins_x: bins, bins_y: bins }).unwrap();
    let cmp = density_distance(&emp, &ana, 100.0);
    r.check(
        "4c bin z-scores",
        cmp.max_abs_z < 4.0 && cmp.bins_tested > 0,
        format!("max |z| {:.2} over {} bins with >= 100 expected counts", cmp.max_abs_z, cmp.bins_tested),
    );
}

fn general_density(r: &mut Report, workers: usize) {
    let Some(Command::Density { model, qi, n, .. }) = figure(7) else { unreachable!() };
    let cfg = model.measurement().unwrap();
    let init = GaussianState::coherent(qi[0], qi[1]);
    let start = Instant::now();
    let ens = match simulate_ensemble_par(&init, &cfg, SimOptions::default(), n, DEFAULT_SEED, false, workers) {
        Ok(e) => e,
        Err(e) => return r.error("5 general-strength covariance", e),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let ana = analytic_density_general(Vec2::new(qi[0], qi[1]), model.tf, cfg.strengths()).unwrap();
    let v = ana.covariance();
    let scale = v.symmetric_eigen().eigenvalues.max();
    let cov = ens.covariance();
    let err = max_abs((0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| cov[i][j] - v[(i, j)])) / scale;
    r.check(
        "5 general-strength covariance",
        err < 0.05,
        format!(
            "empirical {cov:.4?} vs [[{:.4}, {:.4}], [{:.4}, {:.4}]], worst element {:.2}% of the largest eigenvalue, dt {}, {elapsed:.0} s",
            v[(0, 0)], v[(0, 1)], v[(1, 0)], v[(1, 1)], 100.0 * err, model.dt
        ),
    );
}

fn energetics(r: &mut Report) {
    let qi = Vec2::new(3.0, 4.0);
    let tf = 10.0;
    let t = 1.0;
    let still = solve_op_equal(&BoundaryConditions::new(qi, globally_most_likely_endpoint(qi, tf), tf).unwrap(), t).unwrap();
    let e_m = 0.5 + 0.5 * qi.norm_squared();
    let grid = uniform_grid(tf, 101);
    let dev_m = max_abs(grid.iter().map(|&tau| still.mechanical_energy(tau).unwrap() - e_m));
    let dev_s = (still.stochastic_energy() + 0.5 / t).abs();
    let dev_p = max_abs(grid.iter().map(|&tau| still.p_unchecked(tau).amax()));
    r.check(
        "6a p = 0 path",
        dev_m < 1e-10 && dev_s < 1e-10,
        format!("|E_M - {e_m}| {dev_m:.1e}, |E_s + 1/2T| {dev_s:.1e}, max |p| {dev_p:.1e}"),
    );
    let Some(Command::Mlp { model, qi, qf, .. }) = figure(5) else { unreachable!() };
    let bc = BoundaryConditions::new(Vec2::new(qi[0], qi[1]), Vec2::new(qf[0], qf[1]), model.tf).unwrap();
    let sol = solve_op_equal(&bc, model.tau1).unwrap();
    // Energy of the sampled path against the closed-form quadratic.
    let dev = max_abs(grid.iter().map(|&tau| {
        let direct = 0.25 * (sol.cov.q3 + sol.cov.q5) + 0.5 * sol.q_unchecked(tau).norm_squared();
        direct - sol.mechanical_energy(tau).unwrap()
    }));
    let e = |tau: f64| sol.mechanical_energy(tau).unwrap();
    let h = model.tf / 2.0;
    let curvature = (e(0.0) - 2.0 * e(h) + e(model.tf)) / (h * h);
    let third = max_abs((0..97).map(|k| {
        let a = grid[k];
        let d = grid[1] - grid[0];
        (e(a + 3.0 * d) - 3.0 * e(a + 2.0 * d) + 3.0 * e(a + d) - e(a)) / (d * d * d)
    }));
    r.check(
        "6b quadratic E_M on the figure-5 path",
        dev < 1e-10,
        format!("max deviation {dev:.1e}, second derivative {curvature:.4}, largest third difference {third:.1e}"),
    );
}

fn clustering(r: &mut Report, workers: usize) {
    let Some(Command::Cluster { model, qi, epsilon, pool, cluster_size, max_trials, seed, .. }) = figure(6) else {
        unreachable!()
    };
    let cfg = model.measurement().unwrap();
    let source = SimulationSource {
        init: GaussianState::coherent(qi[0], qi[1]),
        cfg,
        options: SimOptions::default(),
        // the calibration run used `seed`; check on an independent stream
        master_seed: seed + 1,
    };
    for (k, target) in FIGURE6_TARGETS.iter().enumerate() {
        let id = format!("7{} cluster near ({}, {})", (b'a' + k as u8) as char, target[0], target[1]);
        let spec = ClusterSpec { target: Vec2::new(target[0], target[1]), epsilon, pool_size: pool, cluster_size, max_trials };
        let start = Instant::now();
        let outcome = postselect_pool_par(&source, &spec, workers).and_then(|p| {
            let path = cluster_least_distance(&p, &spec)?;
            let bc = BoundaryConditions::new(Vec2::new(qi[0], qi[1]), spec.target, model.tf)?;
            let mlp = solve_op(&bc, cfg.strengths())?;
            let cmp = compare_to_mlp(&path, &mlp)?;
            // whole-pool average, to separate clustering noise from the paths
            let everyone = cluster_from_positions(&p, &distance_matrix(&p.members)?, (0..p.len()).collect());
            let pool_rms = compare_to_mlp(&everyone, &mlp)?.rms;
            Ok((p.trials, p.acceptance_rate(), cmp, pool_rms))
        });
        match outcome {
            Ok((trials, rate, cmp, pool_rms)) => r.check(
                &id,
                cmp.passes(CLUSTER_RMS_THRESHOLD),
                format!(
                    "RMS {:.3} (threshold {CLUSTER_RMS_THRESHOLD}), whole-pool average RMS {pool_rms:.3}, {trials} trials, \
                     acceptance {:.3}, {:.1} s",
                    cmp.rms,
                    rate,
                    start.elapsed().as_secs_f64()
                ),
            ),
            Err(e) => r.error(&id, e),
        }
    }
}

fn oracle(r: &mut Report, workers: usize) {
    let s = Strengths::equal(1.0).unwrap();
    let config = |dt: f64, seed: u64| {
        let mut c = OracleConfig::new(3.0, 4.0, s, dt, 5.0);
        c.dim = DEFAULT_DIM;
        c.stream = StreamId { master_seed: seed, index: 0 };
        // leakage is reported on its own line instead of aborting the run
        c.leakage_tol = f64::INFINITY;
        c
    };
    let start = Instant::now();
    match run_oracle(&config(1e-4, DEFAULT_SEED)) {
        Ok(cmp) => {
            let worst = max_abs(cmp.max_deviation);
            r.check(
                "8a oracle deviation",
                worst < 1e-2,
                format!(
                    "max over five moments {worst:.2e} (means {:.2e}, covariance {:.2e}), min purity {:.6}, {:.0} s",
                    cmp.max_mean_deviation(),
                    cmp.max_covariance_deviation(),
                    cmp.min_purity,
                    start.elapsed().as_secs_f64()
                ),
            );
            r.check(
                "8b oracle truncation leakage",
                cmp.max_top_population < 1e-10,
                format!("top-five population reached {:.2e} (limit 1e-10) at dim {DEFAULT_DIM}", cmp.max_top_population),
            );
        }
        Err(e) => r.error("8a oracle deviation", e),
    }

    let seeds: Vec<u64> = (0..4).collect();
    let configs: Vec<OracleConfig> =
        seeds.iter().flat_map(|&k| [config(2e-4, DEFAULT_SEED + 100 + k), config(1e-4, DEFAULT_SEED + 100 + k)]).collect();
    match run_oracles(&configs, workers) {
        Ok(devs) => {
            let coarse: f64 = devs.iter().step_by(2).sum::<f64>() / seeds.len() as f64;
            let fine: f64 = devs.iter().skip(1).step_by(2).sum::<f64>() / seeds.len() as f64;
            let ratio = coarse / fine;
            r.check(
                "8c halving with dt",
                ratio >= HALVING_MIN_RATIO,
                format!(
                    "mean max deviation over {} paths {coarse:.2e} at dt 2e-4, {fine:.2e} at 1e-4, ratio {ratio:.2} (need >= {HALVING_MIN_RATIO})",
                    seeds.len()
                ),
            );
        }
        Err(e) => r.error("8c halving with dt", e),
    }

    let slope = kraus_slope();
    r.check("8d Kraus vs master-equation step", (slope - 1.5).abs() < 0.1, format!("per-step difference scales as dt^{slope:.3}"));
}

fn run_oracles(configs: &[OracleConfig], workers: usize) -> contmeas_core::Result<Vec<f64>> {
    contmeas::ensemble::run_oracles_par(configs, workers)?
        .into_iter()
        .map(|c| c.map(|c| max_abs(c.max_deviation)))
        .collect()
}

/// Log-log slope of the one-step moment difference between the exact
/// product of Kraus operators and the default master-equation step.
fn kraus_slope() -> f64 {
    let s = Strengths::equal(1.0).unwrap();
    let dim = 30;
    let ops = KrausOperators::new(dim);
    let rho = coherent_init(1.0, 0.5, dim).unwrap();
    let m0 = extract_moments(&rho);
    let z = [0.7, -1.2];
    let diff = |dt: f64| {
        let dw = [z[0] * dt.sqrt(), z[1] * dt.sqrt()];
        let r = Readout { r1: m0.q1 + dw[0] / dt, r2: Some(m0.q2 + dw[1] / dt) };
        let a = extract_moments(&kraus_step(&rho, &ops, &s, dt, &r, KrausOrder::PThenX).unwrap()).as_array();
        let b = extract_moments(&sme_step(&rho, &s, dt, dw, SmeScheme::Milstein).unwrap()).as_array();
        max_abs((0..5).map(|i| a[i] - b[i]))
    };
    (diff(1e-3) / diff(1e-5)).log10() / 2.0
}

fn properties(r: &mut Report, workers: usize) {
    let mut u = Uniform(11);
    let all = [Strengths::equal(1.3).unwrap(), Strengths::general(0.7, 3.0).unwrap(), Strengths::position_only(0.9).unwrap()];

    let mut min_det = f64::INFINITY;
    for (k, s) in all.iter().enumerate() {
        let init = GaussianState::with_covariance(1.0, -2.0, Covariance::new(2.5, 1.0, 5.5));
        let cfg = MeasurementConfig::new(*s, 1e-3, 5.0).unwrap();
        let opts = SimOptions { covariance: CovarianceMode::Evolving, noise: NoiseMode::Gaussian };
        let rec = simulate_trajectory(&init, &cfg, opts, DEFAULT_SEED, k as u64).unwrap();
        min_det = rec.cov.iter().map(|c| c.det()).fold(min_det, f64::min);
    }
    r.check("9a Heisenberg bound", min_det >= 1.0 - 1e-9, format!("min q3 q5 - q4^2 = {min_det:.12}"));

    let mut min_eig = f64::INFINITY;
    for _ in 0..1000 {
        let q3 = u.next(0.3, 5.0);
        let q4 = u.next(-2.0, 2.0);
        let c = Covariance::new(q3, q4, (1.0 + q4 * q4 + u.next(0.0, 5.0)) / q3);
        for s in &all {
            let b = diffusion_matrices(&c, s).diffusion;
            min_eig = min_eig.min(b.symmetric_eigen().eigenvalues.min() / b.amax());
        }
    }
    r.check("9b diffusion tensor PSD", min_eig >= -1e-12, format!("smallest relative eigenvalue {min_eig:.1e} over 3000 cases"));

    let mut t_dev = 0.0f64;
    for _ in 0..200 {
        let qi = Vec2::new(u.next(-6.0, 6.0), u.next(-6.0, 6.0));
        let qf = Vec2::new(u.next(-6.0, 6.0), u.next(-6.0, 6.0));
        let bc = BoundaryConditions::new(qi, qf, u.next(0.5, 20.0)).unwrap();
        let base = solve_op_equal(&bc, 1.0).unwrap();
        let other = solve_op_equal(&bc, u.next(0.3, 3.0)).unwrap();
        for tau in uniform_grid(bc.tf(), 21) {
            t_dev = t_dev.max((other.q_unchecked(tau) - base.q_unchecked(tau)).amax());
        }
    }
    r.check("9c equal-strength paths independent of T", t_dev < 1e-10, format!("max coordinate difference {t_dev:.1e}"));

    let mut chi0 = 0.0f64;
    for _ in 0..100 {
        let q3 = u.next(0.3, 5.0);
        let q4 = u.next(-2.0, 2.0);
        let c = Covariance::new(q3, q4, (1.0 + q4 * q4 + u.next(0.0, 5.0)) / q3);
        let p = CharacteristicFunctionParams::new(Vec2::new(u.next(-6.0, 6.0), u.next(-6.0, 6.0)), c.matrix()).unwrap();
        chi0 = chi0.max((characteristic_function(&p, Vec2::zeros()) - 1.0).norm());
    }
    r.check("9d characteristic function at zero", chi0 < 1e-15, format!("max |chi(0) - 1| = {chi0:.1e}"));

    let cfg = MeasurementConfig::new(Strengths::equal(1.0).unwrap(), 1e-2, 2.0).unwrap();
    let init = GaussianState::coherent(3.0, 4.0);
    let runs: Vec<_> = [1, 2, workers.max(3)]
        .iter()
        .map(|&w| simulate_ensemble_par(&init, &cfg, SimOptions::default(), 2000, 5, false, w).unwrap())
        .collect();
    let source = SimulationSource { init, cfg, options: SimOptions::default(), master_seed: 5 };
    let mut spec = ClusterSpec::new(globally_most_likely_endpoint(Vec2::new(3.0, 4.0), 2.0));
    spec.pool_size = 40;
    spec.cluster_size = 10;
    let pools: Vec<_> = [1, 3].iter().map(|&w| postselect_pool_par(&source, &spec, w).unwrap()).collect();
    r.check(
        "9e determinism under worker counts",
        runs.windows(2).all(|w| w[0] == w[1]) && pools[0] == pools[1],
        format!("ensembles with 1, 2, {} workers and pools with 1, 3 workers identical", workers.max(3)),
    );
}

fn main() {
    let workers = worker_count();
    println!("acceptance: {workers} worker(s)");
    let mut r = Report { passed: 0, failed: 0 };
    let total = Instant::now();
    // `cargo test --test acceptance -- 7 8` runs only those criteria
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |n: &str| only.is_empty() || only.iter().any(|a| a == n);
    if want("1") {
        fixed_points(&mut r);
    }
    if want("2") {
        covariance_convergence(&mut r);
    }
    if want("3") {
        optimal_paths(&mut r);
    }
    if want("6") {
        energetics(&mut r);
    }
    if want("9") {
        properties(&mut r, workers);
    }
    if want("5") {
        general_density(&mut r, workers);
    }
    if want("7") {
        clustering(&mut r, workers);
    }
    if want("8") {
        oracle(&mut r, workers);
    }
    if want("4") {
        equal_density(&mut r, workers);
    }
    println!("acceptance: {} passed, {} failed, {:.0} s", r.passed, r.failed, total.elapsed().as_secs_f64());
}
