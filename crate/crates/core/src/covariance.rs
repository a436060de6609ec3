//! Deterministic covariance dynamics: integration, purification envelopes and
//! linear stability of the steady state.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::gaussian::{fixed_point_covariance, Covariance, MeasurementConfig, Strengths, HEISENBERG_TOL};

/// Determinant level below which an integration step is rejected.
pub const STEP_DET_TOL: f64 = 1e-6;

/// Absolute slack on the decay envelopes.
pub const ENVELOPE_SLACK: f64 = 1e-7;

/// Right-hand side `(dq3, dq4, dq5)/dtau` of the covariance equations.
pub fn covariance_rhs(c: &Covariance, s: &Strengths) -> [f64; 3] {
    let a = 0.5 / s.tau1();
    let b = 0.5 * s.inv_tau2();
    let Covariance { q3, q4, q5 } = *c;
    [
        2.0 * q4 - a * q3 * q3 - b * q4 * q4 + b,
        q5 - q3 - a * q3 * q4 - b * q4 * q5,
        -2.0 * q4 - a * q4 * q4 - b * q5 * q5 + a,
    ]
}

/// One classical Runge-Kutta step of the covariance equations.
pub fn rk4_step(c: &Covariance, s: &Strengths, h: f64) -> Covariance {
    let add = |c: &Covariance, k: &[f64; 3], f: f64| {
        Covariance::new(c.q3 + f * k[0], c.q4 + f * k[1], c.q5 + f * k[2])
    };
    let k1 = covariance_rhs(c, s);
    let k2 = covariance_rhs(&add(c, &k1, 0.5 * h), s);
    let k3 = covariance_rhs(&add(c, &k2, 0.5 * h), s);
    let k4 = covariance_rhs(&add(c, &k3, h), s);
    let mut out = [0.0; 3];
    let x = c.as_array();
    for i in 0..3 {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Covariance::from_array(out)
}

/// Sampled covariance evolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Covariance>,
    /// `q3 q5 - q4^2` at each grid point.
    pub det: Vec<f64>,
}

impl CovarianceTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&Covariance> {
        self.values.last()
    }
}

/// Integrates the covariance equations from `init` over `[0, tf]` with a fixed
/// RK4 step of at most `cfg.dt()`.
pub fn integrate_covariance(init: Covariance, cfg: &MeasurementConfig) -> Result<CovarianceTrajectory> {
    init.validate(HEISENBERG_TOL)?;
    let s = cfg.strengths();
    let n = cfg.steps();
    let h = cfg.step_size();
    let mut traj = CovarianceTrajectory {
        times: Vec::with_capacity(n + 1),
        values: Vec::with_capacity(n + 1),
        det: Vec::with_capacity(n + 1),
    };
    let mut c = init;
    traj.times.push(0.0);
    traj.values.push(c);
    traj.det.push(c.det());
    for k in 1..=n {
        c = rk4_step(&c, s, h);
        let det = c.det();
        let tau = k as f64 * h;
        if !(det >= 1.0 - STEP_DET_TOL) {
            return Err(Error::StepSize { tau, det, dt: h });
        }
        traj.times.push(tau);
        traj.values.push(c);
        traj.det.push(det);
    }
    Ok(traj)
}

/// Outcome of an envelope check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    /// Smallest `bound - lhs` over the grid (slack included).
    pub worst_margin: f64,
    pub worst_tau: f64,
    /// Number of grid points checked.
    pub points: usize,
}

fn check_envelope(
    times: &[f64],
    lhs: impl Iterator<Item = f64>,
    initial: f64,
    rate: f64,
) -> Result<BoundReport> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let mut report = BoundReport { worst_margin: f64::INFINITY, worst_tau: 0.0, points: 0 };
    for (&tau, value) in times.iter().zip(lhs) {
        let bound = initial.abs() * (-rate * tau).exp() + ENVELOPE_SLACK;
        let margin = bound - value.abs();
        if margin < 0.0 {
            return Err(Error::BoundViolation { tau, lhs: value.abs(), bound });
        }
        if margin < report.worst_margin {
            report.worst_margin = margin;
            report.worst_tau = tau;
        }
        report.points += 1;
    }
    Ok(report)
}

/// Checks `|A(tau) - 1| <= |A(0) - 1| exp(-tau / sqrt(tau1 tau2))` pointwise.
pub fn determinant_bound_check(traj: &CovarianceTrajectory, s: &Strengths) -> Result<BoundReport> {
    let rate = (s.inv_tau2() / s.tau1()).sqrt();
    let a0 = traj.det.first().copied().unwrap_or(1.0) - 1.0;
    check_envelope(&traj.times, traj.det.iter().map(|d| d - 1.0), a0, rate)
}

/// Deviations `(x, y, z)` of a covariance from the steady state.
pub fn deviation(c: &Covariance, fixed: &Covariance) -> [f64; 3] {
    [c.q3 - fixed.q3, c.q4 - fixed.q4, c.q5 - fixed.q5]
}

/// Checks `|xz - y^2| <= |x0 z0 - y0^2| exp(-sqrt(2 / tau1 tau2) tau)` pointwise.
pub fn quadratic_deviation_bound_check(traj: &CovarianceTrajectory, s: &Strengths) -> Result<BoundReport> {
    let fixed = fixed_point_covariance(s);
    let rate = (2.0 * s.inv_tau2() / s.tau1()).sqrt();
    let quad = |c: &Covariance| {
        let [x, y, z] = deviation(c, &fixed);
        x * z - y * y
    };
    let initial = traj.values.first().map(quad).unwrap_or(0.0);
    check_envelope(&traj.times, traj.values.iter().map(quad), initial, rate)
}

/// Linearization of the covariance dynamics about the steady state.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub fixed_point: Covariance,
    pub matrix: Matrix3<f64>,
    pub eigenvalues: [Complex64; 3],
    /// Every eigenvalue has a strictly negative real part.
    pub all_stable: bool,
    /// `-(q3/2tau1 + q5/2tau2)` at the steady state, the expected real eigenvalue.
    pub predicted_real_eigenvalue: f64,
}

impl StabilityReport {
    /// Eigenvalue with the smallest imaginary magnitude.
    pub fn real_eigenvalue(&self) -> Complex64 {
        let mut best = self.eigenvalues[0];
        for &l in &self.eigenvalues[1..] {
            if l.im.abs() < best.im.abs() {
                best = l;
            }
        }
        best
    }

    /// Largest `||M v - lambda v||` over the spectrum, `v` unit-normalized.
    pub fn max_eigen_residual(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&l| eigen_residual(&self.matrix, l))
            .fold(0.0, f64::max)
    }
}

/// Jacobian of the covariance equations at the steady state.
pub fn linearization_matrix(s: &Strengths) -> (Covariance, Matrix3<f64>) {
    let fp = fixed_point_covariance(s);
    let i1 = 1.0 / s.tau1();
    let i2 = s.inv_tau2();
    let Covariance { q3, q4, q5 } = fp;
    let m = Matrix3::new(
        -q3 * i1,
        2.0 - q4 * i2,
        0.0,
        -(1.0 + 0.5 * q4 * i1),
        -(0.5 * q3 * i1 + 0.5 * q5 * i2),
        1.0 - 0.5 * q4 * i2,
        0.0,
        -(2.0 + q4 * i1),
        -q5 * i2,
    );
    (fp, m)
}

pub fn linearization(s: &Strengths) -> StabilityReport {
    let (fp, m) = linearization_matrix(s);
    let ev = m.complex_eigenvalues();
    let eigenvalues = [ev[0], ev[1], ev[2]];
    StabilityReport {
        fixed_point: fp,
        matrix: m,
        all_stable: eigenvalues.iter().all(|l| l.re < 0.0),
        eigenvalues,
        predicted_real_eigenvalue: -(0.5 * fp.q3 / s.tau1() + 0.5 * fp.q5 * s.inv_tau2()),
    }
}

/// `||(M - lambda) v||` for the null vector `v` of `M - lambda` built from the
/// best-conditioned cross product of two rows.
pub fn eigen_residual(m: &Matrix3<f64>, lambda: Complex64) -> f64 {
    let shifted: [[Complex64; 3]; 3] = core::array::from_fn(|i| {
        core::array::from_fn(|j| {
            let d = if i == j { lambda } else { Complex64::new(0.0, 0.0) };
            Complex64::new(m[(i, j)], 0.0) - d
        })
    });
    let cross = |a: &[Complex64; 3], b: &[Complex64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let norm = |v: &[Complex64; 3]| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut best = [Complex64::new(0.0, 0.0); 3];
    let mut best_norm = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let c = cross(&shifted[i], &shifted[j]);
        let n = norm(&c);
        if n > best_norm {
            best_norm = n;
            best = c;
        }
    }
    if best_norm == 0.0 {
        // M - lambda has rank <= 1; any residual is zero for a suitable v
        return 0.0;
    }
    let v = best.map(|c| c / best_norm);
    let mv = Vector3::from_fn(|i, _| (0..3).map(|j| shifted[i][j] * v[j]).sum::<Complex64>());
    mv.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}
