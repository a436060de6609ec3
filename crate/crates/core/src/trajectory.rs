//! Euler-Maruyama integration of the conditional quadrature means together
//! with the measurement records they generate.
//!
//! Random streams: trajectory `index` of an ensemble with master seed `m` draws
//! from `ChaCha8Rng` keyed by four successive SplitMix64 outputs of `m`, with
//! the ChaCha stream id set to `index`. Each step consumes two standard
//! normals (`dW1` then `dW2`), also when only position is monitored, so a
//! stream's samples never depend on the configuration.

use alloc::vec::Vec;

// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::rk4_step;
use crate::error::{Error, Result};
use crate::gaussian::{
    diffusion_matrices, fixed_point_covariance, mechanical_energy, Covariance, GaussianState,
    MeasurementConfig, Strengths,
};
use crate::Mat2;

/// One SplitMix64 output; advances `state`.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream of ensemble member `index`.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut state = master_seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Identifies the stream a trajectory was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub master_seed: u64,
    pub index: u64,
}

/// How the covariance behaves while the means evolve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CovarianceMode {
    /// Held at the steady state; the covariance of the initial state is ignored.
    #[default]
    SteadyState,
    /// Starts from the initial covariance and follows the deterministic
    /// covariance equations with one RK4 step per time step.
    Evolving,
}

/// Noise source for the means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// All increments zero: the free rotation of the means.
    Silent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub covariance: CovarianceMode,
    pub noise: NoiseMode,
}

/// Readouts produced during one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Readout {
    pub r1: f64,
    /// Absent when momentum is not monitored.
    pub r2: Option<f64>,
}

/// Advances the means by one Euler-Maruyama step `q += Omega q dtau + b dW`.
///
/// The readouts `r = q + sqrt(tau) dW / dtau` use the means before the step.
/// In [`CovarianceMode::Evolving`] the covariance is then advanced one RK4
/// step; otherwise it is left untouched.
pub fn step(
    state: &GaussianState,
    s: &Strengths,
    dt: f64,
    dw: [f64; 2],
    mode: CovarianceMode,
) -> (GaussianState, Readout) {
    let b = diffusion_matrices(&state.cov, s).b;
    let (q1, q2) = advance_mean(state.q1, state.q2, &b, dt, dw);
    let readout = readout(state.q1, state.q2, s, dt, dw);
    let cov = match mode {
        CovarianceMode::SteadyState => state.cov,
        CovarianceMode::Evolving => rk4_step(&state.cov, s, dt),
    };
    (GaussianState::with_covariance(q1, q2, cov), readout)
}

#[inline]
fn advance_mean(q1: f64, q2: f64, b: &Mat2, dt: f64, dw: [f64; 2]) -> (f64, f64) {
    (
        q1 + q2 * dt + b[(0, 0)] * dw[0] + b[(0, 1)] * dw[1],
        q2 - q1 * dt + b[(1, 0)] * dw[0] + b[(1, 1)] * dw[1],
    )
}

#[inline]
fn readout(q1: f64, q2: f64, s: &Strengths, dt: f64, dw: [f64; 2]) -> Readout {
    let r1 = q1 + s.tau1().sqrt() * dw[0] / dt;
    let r2 = (!s.is_position_only()).then(|| q2 + dw[1] / (s.inv_sqrt_tau2() * dt));
    Readout { r1, r2 }
}

/// Full record of one simulated trajectory on the grid `tau_k = k dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    /// Covariance at each grid point.
    pub cov: Vec<Covariance>,
    /// Readouts over `[tau_k, tau_{k+1})`; one fewer than grid points.
    pub r1: Vec<f64>,
    pub r2: Option<Vec<f64>>,
    pub dw1: Vec<f64>,
    pub dw2: Vec<f64>,
    /// Mechanical energy at each grid point.
    pub energy: Vec<f64>,
    pub stream: Option<StreamId>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.dw1.len()
    }

    pub fn final_state(&self) -> GaussianState {
        let n = self.times.len() - 1;
        GaussianState::with_covariance(self.q1[n], self.q2[n], self.cov[n])
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }
}

fn starting_state(init: &GaussianState, s: &Strengths, mode: CovarianceMode) -> Result<GaussianState> {
    init.validate()?;
    Ok(match mode {
        CovarianceMode::SteadyState => GaussianState::with_covariance(init.q1, init.q2, fixed_point_covariance(s)),
        CovarianceMode::Evolving => *init,
    })
}

fn try_vec<T>(n: usize) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(n).map_err(|_| Error::ResourceLimit { requested: n })?;
    Ok(v)
}

fn run_recorded(
    init: &GaussianState,
    cfg: &MeasurementConfig,
    mode: CovarianceMode,
    mut noise: impl FnMut(usize) -> [f64; 2],
    stream: Option<StreamId>,
) -> Result<TrajectoryRecord> {
    let s = cfg.strengths();
    let n = cfg.steps();
    let h = cfg.step_size();
    let mut state = starting_state(init, s, mode)?;
    let mut rec = TrajectoryRecord {
        times: try_vec(n + 1)?,
        q1: try_vec(n + 1)?,
        q2: try_vec(n + 1)?,
        cov: try_vec(n + 1)?,
        r1: try_vec(n)?,
        r2: if s.is_position_only() { None } else { Some(try_vec(n)?) },
        dw1: try_vec(n)?,
        dw2: try_vec(n)?,
        energy: try_vec(n + 1)?,
        stream,
    };
    let push_state = |rec: &mut TrajectoryRecord, k: usize, st: &GaussianState| {
        rec.times.push(k as f64 * h);
        rec.q1.push(st.q1);
        rec.q2.push(st.q2);
        rec.cov.push(st.cov);
        rec.energy.push(mechanical_energy(st));
    };
    push_state(&mut rec, 0, &state);
    for k in 0..n {
        let dw = noise(k);
        let (next, r) = step(&state, s, h, dw, mode);
        rec.r1.push(r.r1);
        if let (Some(v), Some(r2)) = (rec.r2.as_mut(), r.r2) {
            v.push(r2);
        }
        rec.dw1.push(dw[0]);
        rec.dw2.push(dw[1]);
        state = next;
        push_state(&mut rec, k + 1, &state);
    }
    Ok(rec)
}

fn gaussian_increments(rng: &mut ChaCha8Rng, sqrt_dt: f64) -> [f64; 2] {
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    [sqrt_dt * z1, sqrt_dt * z2]
}

/// Simulates one trajectory drawn from stream `(master_seed, index)`.
pub fn simulate_trajectory(
    init: &GaussianState,
    cfg: &MeasurementConfig,
    opts: SimOptions,
    master_seed: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    let sqrt_dt = cfg.step_size().sqrt();
    let mut rng = stream_rng(master_seed, index);
    let stream = Some(StreamId { master_seed, index });
    match opts.noise {
        NoiseMode::Gaussian => {
            run_recorded(init, cfg, opts.covariance, |_| gaussian_increments(&mut rng, sqrt_dt), stream)
        }
        NoiseMode::Silent => run_recorded(init, cfg, opts.covariance, |_| [0.0, 0.0], stream),
    }
}

/// Re-runs the stepper with stored increments.
pub fn replay(
    init: &GaussianState,
    cfg: &MeasurementConfig,
    mode: CovarianceMode,
    dw1: &[f64],
    dw2: &[f64],
) -> Result<TrajectoryRecord> {
    let n = cfg.steps();
    if dw1.len() != n || dw2.len() != n {
        return Err(Error::GridMismatch(alloc::format!(
            "{n} steps but {} / {} increments",
            dw1.len(),
            dw2.len()
        )));
    }
    run_recorded(init, cfg, mode, |k| [dw1[k], dw2[k]], None)
}

/// Final means of trajectory `(master_seed, index)` without storing the path.
///
/// Bit-identical to the last point of [`simulate_trajectory`].
pub fn simulate_final_state(
    init: &GaussianState,
    cfg: &MeasurementConfig,
    opts: SimOptions,
    master_seed: u64,
    index: u64,
) -> Result<[f64; 2]> {
    let s = cfg.strengths();
    let n = cfg.steps();
    let h = cfg.step_size();
    let sqrt_dt = h.sqrt();
    let mut state = starting_state(init, s, opts.covariance)?;
    let mut rng = stream_rng(master_seed, index);
    match opts.covariance {
        CovarianceMode::SteadyState => {
            let b = diffusion_matrices(&state.cov, s).b;
            let (mut q1, mut q2) = (state.q1, state.q2);
            for _ in 0..n {
                let dw = match opts.noise {
                    NoiseMode::Gaussian => gaussian_increments(&mut rng, sqrt_dt),
                    NoiseMode::Silent => [0.0, 0.0],
                };
                (q1, q2) = advance_mean(q1, q2, &b, h, dw);
            }
            Ok([q1, q2])
        }
        CovarianceMode::Evolving => {
            for _ in 0..n {
                let dw = match opts.noise {
                    NoiseMode::Gaussian => gaussian_increments(&mut rng, sqrt_dt),
                    NoiseMode::Silent => [0.0, 0.0],
                };
                state = step(&state, s, h, dw, CovarianceMode::Evolving).0;
            }
            Ok([state.q1, state.q2])
        }
    }
}

/// Outcome of an ensemble run. Samples are stored by member index.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub count: usize,
    pub finals: Vec<[f64; 2]>,
    pub records: Option<Vec<TrajectoryRecord>>,
    pub master_seed: u64,
    pub init: GaussianState,
    pub cfg: MeasurementConfig,
    pub options: SimOptions,
}

impl EnsembleResult {
    pub fn stream(&self, index: usize) -> StreamId {
        StreamId { master_seed: self.master_seed, index: index as u64 }
    }

    pub fn mean(&self) -> [f64; 2] {
        sample_moments(&self.finals).0
    }

    /// Unbiased sample covariance `[[c11, c12], [c12, c22]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        sample_moments(&self.finals).1
    }
}

/// Sample mean and unbiased covariance of 2-vectors.
pub fn sample_moments(xs: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = xs.len() as f64;
    let mut m = [0.0; 2];
    for x in xs {
        m[0] += x[0];
        m[1] += x[1];
    }
    m[0] /= n;
    m[1] /= n;
    let mut c = [[0.0; 2]; 2];
    for x in xs {
        let d = [x[0] - m[0], x[1] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += d[i] * d[j];
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    for row in &mut c {
        for v in row {
            *v /= denom;
        }
    }
    (m, c)
}

/// Sequential ensemble of `n` members drawn from streams `0..n`.
pub fn simulate_ensemble(
    init: &GaussianState,
    cfg: &MeasurementConfig,
    opts: SimOptions,
    n: usize,
    master_seed: u64,
    keep_records: bool,
) -> Result<EnsembleResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let mut finals = try_vec(n)?;
    let mut records = if keep_records { Some(try_vec(n)?) } else { None };
    for i in 0..n as u64 {
        if let Some(recs) = records.as_mut() {
            let rec = simulate_trajectory(init, cfg, opts, master_seed, i)?;
            let f = rec.final_state();
            finals.push([f.q1, f.q2]);
            recs.push(rec);
        } else {
            finals.push(simulate_final_state(init, cfg, opts, master_seed, i)?);
        }
    }
    Ok(EnsembleResult { count: n, finals, records, master_seed, init: *init, cfg: *cfg, options: opts })
}
