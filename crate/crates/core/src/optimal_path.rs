//! Optimal (most-likely) paths of the stochastic action with the covariance at
//! its steady state.
//!
//! Along an optimal path `dq/dtau = B p + Omega q` and `dp/dtau = Omega p`, so
//! the costate rotates rigidly, `p(tau) = U(tau) alpha`, and the boundary
//! value problem reduces to a 2x2 linear solve for `alpha`.

use alloc::vec::Vec;

// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::gaussian::{
    diffusion_matrices, fixed_point_covariance, info_gain_rate, Covariance, DiffusionMatrices, Regime, Strengths,
};
use crate::trajectory::Readout;
use crate::{Mat2, Vec2};

/// Grid size used when callers do not supply one.
pub const DEFAULT_GRID_POINTS: usize = 1001;

/// Relative determinant floor for the boundary matrix.
const SINGULAR_REL_TOL: f64 = 1e-14;

/// Free evolution `U(tau) = exp(Omega tau) = [[cos, sin], [-sin, cos]]`.
pub fn rotation(tau: f64) -> Mat2 {
    let (s, c) = tau.sin_cos();
    Mat2::new(c, s, -s, c)
}

/// Endpoint of the noise-free rotation, the most likely final state.
pub fn globally_most_likely_endpoint(qi: Vec2, tf: f64) -> Vec2 {
    rotation(tf) * qi
}

/// Conjugate momenta of the stochastic action.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Costate {
    pub p1: f64,
    pub p2: f64,
}

impl Costate {
    pub fn new(p1: f64, p2: f64) -> Self {
        Self { p1, p2 }
    }

    pub fn vector(&self) -> Vec2 {
        Vec2::new(self.p1, self.p2)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.p1 * self.p1 + self.p2 * self.p2
    }
}

impl From<Vec2> for Costate {
    fn from(v: Vec2) -> Self {
        Self { p1: v[0], p2: v[1] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryConditions {
    pub qi: Vec2,
    pub qf: Vec2,
    tf: f64,
}

impl BoundaryConditions {
    pub fn new(qi: Vec2, qf: Vec2, tf: f64) -> Result<Self> {
        if !(tf > 0.0 && tf.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!("final time must be positive, got {tf}")));
        }
        if !(qi.iter().chain(qf.iter()).all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("boundary values must be finite".into()));
        }
        Ok(Self { qi, qf, tf })
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    /// Offset of `qf` from the most likely endpoint.
    pub fn mismatch(&self) -> Vec2 {
        self.qf - globally_most_likely_endpoint(self.qi, self.tf)
    }
}

/// Readout-scaled innovations `R - X`: component `j` is `(r_j - q_j)/sqrt(tau_j)`.
fn innovations(q: Vec2, r: &Readout, s: &Strengths) -> Vec2 {
    let w1 = (r.r1 - q[0]) / s.tau1().sqrt();
    let w2 = match r.r2 {
        Some(r2) if !s.is_position_only() => (r2 - q[1]) * s.inv_sqrt_tau2(),
        _ => 0.0,
    };
    Vec2::new(w1, w2)
}

/// `p^T (Omega q + b [R - X]) - |R - X|^2 / 2 - g`.
pub fn stochastic_hamiltonian(q: Vec2, p: Costate, r: &Readout, cov: &Covariance, s: &Strengths) -> f64 {
    let m = diffusion_matrices(cov, s);
    let w = innovations(q, r, s);
    let p = p.vector();
    p.dot(&(m.omega * q + m.b * w)) - 0.5 * w.norm_squared() - info_gain_rate(cov, s)
}

/// `p^T B p / 2 + p^T Omega q - g`, the Hamiltonian at the optimal readout.
pub fn op_hamiltonian_star(q: Vec2, p: Costate, cov: &Covariance, s: &Strengths) -> f64 {
    let m = diffusion_matrices(cov, s);
    let p = p.vector();
    0.5 * p.dot(&(m.diffusion * p)) + p.dot(&(m.omega * q)) - info_gain_rate(cov, s)
}

/// Readouts maximizing the path probability: `R* = X + b^T p`.
pub fn optimal_readout(q: Vec2, p: Costate, cov: &Covariance, s: &Strengths) -> Readout {
    let w = diffusion_matrices(cov, s).b.transpose() * p.vector();
    let r1 = q[0] + s.tau1().sqrt() * w[0];
    let r2 = (!s.is_position_only()).then(|| q[1] + w[1] / s.inv_sqrt_tau2());
    Readout { r1, r2 }
}

/// Which closed form evaluates the path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathForm {
    /// Arbitrary strengths, matrix form.
    General,
    /// Equal strengths, `B = I / 4T`.
    Equal,
    /// Position monitoring only, explicit component form.
    PositionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimalPathSolution {
    pub bc: BoundaryConditions,
    pub strengths: Strengths,
    pub cov: Covariance,
    pub diffusion: DiffusionMatrices,
    /// Costate at `tau = 0`.
    pub alpha: Vec2,
    /// Boundary matrix `A(tf)`.
    pub boundary: Mat2,
    pub form: PathForm,
}

/// `A(tau) = (zeta + upsilon)/2 tau U(tau) + sin(tau) D` with
/// `D = [[(zeta - upsilon)/2, xi], [xi, -(zeta - upsilon)/2]]`.
pub fn boundary_matrix(m: &DiffusionMatrices, tau: f64) -> Mat2 {
    let (zeta, xi, upsilon) = (m.zeta(), m.xi(), m.upsilon());
    let half_sum = 0.5 * (zeta + upsilon);
    let half_diff = 0.5 * (zeta - upsilon);
    let d = Mat2::new(half_diff, xi, xi, -half_diff);
    rotation(tau) * (half_sum * tau) + d * tau.sin()
}

/// `det A(tf) = (zeta+upsilon)^2 tf^2/4 - ((zeta-upsilon)^2/4 + xi^2) sin^2 tf`.
pub fn boundary_determinant(m: &DiffusionMatrices, tf: f64) -> f64 {
    let (zeta, xi, upsilon) = (m.zeta(), m.xi(), m.upsilon());
    let s = tf.sin();
    0.25 * (zeta + upsilon).powi(2) * tf * tf - (0.25 * (zeta - upsilon).powi(2) + xi * xi) * s * s
}

fn solve_boundary(a: &Mat2, rhs: Vec2) -> Result<Vec2> {
    let det = a.determinant();
    let scale = a.norm_squared().max(f64::MIN_POSITIVE);
    if !(det > SINGULAR_REL_TOL * scale) {
        return Err(Error::SingularBoundaryMatrix { det });
    }
    let inv = Mat2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det;
    Ok(inv * rhs)
}

fn steady(s: &Strengths) -> (Covariance, DiffusionMatrices) {
    let cov = fixed_point_covariance(s);
    (cov, diffusion_matrices(&cov, s))
}

/// Optimal path for arbitrary strengths.
pub fn solve_op_general(bc: &BoundaryConditions, s: &Strengths) -> Result<OptimalPathSolution> {
    let (cov, m) = steady(s);
    let a = boundary_matrix(&m, bc.tf);
    let rhs = bc.qf - rotation(bc.tf) * bc.qi;
    let alpha = solve_boundary(&a, rhs)?;
    Ok(OptimalPathSolution { bc: *bc, strengths: *s, cov, diffusion: m, alpha, boundary: a, form: PathForm::General })
}

/// Optimal path for equal strengths `T`.
pub fn solve_op_equal(bc: &BoundaryConditions, t: f64) -> Result<OptimalPathSolution> {
    let s = Strengths::equal(t)?;
    let (cov, m) = steady(&s);
    let tf = bc.tf;
    let alpha = (rotation(-tf) * bc.qf - bc.qi) * (4.0 * t / tf);
    let boundary = rotation(tf) * (tf / (4.0 * t));
    Ok(OptimalPathSolution { bc: *bc, strengths: s, cov, diffusion: m, alpha, boundary, form: PathForm::Equal })
}

/// Optimal path when only position is monitored with timescale `T`.
pub fn solve_op_position_only(bc: &BoundaryConditions, t: f64) -> Result<OptimalPathSolution> {
    let s = Strengths::position_only(t)?;
    let (cov, m) = steady(&s);
    let (sum, diff, cross) = position_only_coefficients(&cov, t);
    let tf = bc.tf;
    let (sn, cs) = tf.sin_cos();
    let a = Mat2::new(
        sum * tf * cs + diff * sn,
        (sum * tf + cross) * sn,
        (-sum * tf + cross) * sn,
        sum * tf * cs - diff * sn,
    );
    let (qi, qf) = (bc.qi, bc.qf);
    let rhs = Vec2::new(qf[0] - qi[0] * cs - qi[1] * sn, qf[1] + qi[0] * sn - qi[1] * cs);
    let alpha = solve_boundary(&a, rhs)?;
    Ok(OptimalPathSolution { bc: *bc, strengths: s, cov, diffusion: m, alpha, boundary: a, form: PathForm::PositionOnly })
}

/// `((q3^2 + q4^2)/8T, (q3^2 - q4^2)/8T, 2 q3 q4 / 8T)`.
fn position_only_coefficients(cov: &Covariance, t: f64) -> (f64, f64, f64) {
    let k = 1.0 / (8.0 * t);
    let (a, b) = (cov.q3 * cov.q3, cov.q4 * cov.q4);
    ((a + b) * k, (a - b) * k, 2.0 * cov.q3 * cov.q4 * k)
}

/// Optimal path using the solver matching the configured regime.
pub fn solve_op(bc: &BoundaryConditions, s: &Strengths) -> Result<OptimalPathSolution> {
    solve_op_general(bc, s)
}

/// Samples of an optimal path on a time grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathSamples {
    pub tau: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub r1: Vec<f64>,
    pub r2: Option<Vec<f64>>,
    pub energy: Vec<f64>,
    pub stochastic_energy: f64,
}

/// `n` equally spaced points on `[0, tf]`.
pub fn uniform_grid(tf: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![0.0],
        _ => (0..n).map(|k| tf * k as f64 / (n - 1) as f64).collect(),
    }
}

impl OptimalPathSolution {
    pub fn tf(&self) -> f64 {
        self.bc.tf
    }

    fn check_range(&self, tau: f64) -> Result<()> {
        let tf = self.bc.tf;
        let slack = 1e-12 * tf;
        if tau < -slack || tau > tf + slack || tau.is_nan() {
            return Err(Error::OutOfRange { tau, tf });
        }
        Ok(())
    }

    /// Quadratures at any real `tau`; the closed forms extend past the interval.
    pub fn q_unchecked(&self, tau: f64) -> Vec2 {
        let (qi, qf, tf) = (self.bc.qi, self.bc.qf, self.bc.tf);
        match self.form {
            PathForm::General => rotation(tau) * qi + boundary_matrix(&self.diffusion, tau) * self.alpha,
            PathForm::Equal => {
                let w = tau / tf;
                rotation(tau - tf) * qf * w + rotation(tau) * qi * (1.0 - w)
            }
            PathForm::PositionOnly => {
                let t = self.strengths.tau1();
                let (sum, diff, cross) = position_only_coefficients(&self.cov, t);
                let [a1, a2] = [self.alpha[0], self.alpha[1]];
                let (sn, cs) = tau.sin_cos();
                let q1 = (a1 * sum * tau + qi[0]) * cs + (a2 * sum * tau + qi[1] + a1 * diff + cross * a2) * sn;
                let q2 = -(a1 * sum * tau + qi[0] + a2 * diff - cross * a1) * sn + (a2 * sum * tau + qi[1]) * cs;
                Vec2::new(q1, q2)
            }
        }
    }

    pub fn p_unchecked(&self, tau: f64) -> Vec2 {
        match self.form {
            PathForm::Equal => {
                let (qi, qf, tf) = (self.bc.qi, self.bc.qf, self.bc.tf);
                let t = self.strengths.tau1();
                (rotation(tau - tf) * qf - rotation(tau) * qi) * (4.0 * t / tf)
            }
            _ => rotation(tau) * self.alpha,
        }
    }

    pub fn q(&self, tau: f64) -> Result<Vec2> {
        self.check_range(tau)?;
        Ok(self.q_unchecked(tau))
    }

    pub fn p(&self, tau: f64) -> Result<Costate> {
        self.check_range(tau)?;
        Ok(self.p_unchecked(tau).into())
    }

    pub fn readout(&self, tau: f64) -> Result<Readout> {
        self.check_range(tau)?;
        Ok(optimal_readout(self.q_unchecked(tau), self.p_unchecked(tau).into(), &self.cov, &self.strengths))
    }

    /// Expected mechanical energy on the path.
    pub fn mechanical_energy(&self, tau: f64) -> Result<f64> {
        self.check_range(tau)?;
        Ok(match self.form {
            PathForm::Equal => {
                let target = globally_most_likely_endpoint(self.bc.qi, self.bc.tf);
                let v = target + (self.bc.qf - target) * (tau / self.bc.tf);
                0.5 + 0.5 * v.norm_squared()
            }
            _ => 0.25 * (self.cov.q3 + self.cov.q5) + 0.5 * self.q_unchecked(tau).norm_squared(),
        })
    }

    /// Conserved value of the optimal-path Hamiltonian.
    pub fn stochastic_energy(&self) -> f64 {
        match self.form {
            PathForm::Equal => {
                let t = self.strengths.tau1();
                let tf = self.bc.tf;
                let target = globally_most_likely_endpoint(self.bc.qi, tf);
                let d = self.bc.qf - target;
                let qf = self.bc.qf;
                2.0 * t / (tf * tf) * d.norm_squared() + 4.0 * t / tf * (qf[0] * target[1] - qf[1] * target[0])
                    - 0.5 / t
            }
            _ => {
                let a = self.alpha;
                let qi = self.bc.qi;
                0.5 * a.dot(&(self.diffusion.diffusion * a)) + (qi[1] * a[0] - qi[0] * a[1])
                    - info_gain_rate(&self.cov, &self.strengths)
            }
        }
    }

    /// Optimal-path Hamiltonian evaluated on the solution at `tau`.
    pub fn hamiltonian_at(&self, tau: f64) -> Result<f64> {
        self.check_range(tau)?;
        Ok(op_hamiltonian_star(
            self.q_unchecked(tau),
            self.p_unchecked(tau).into(),
            &self.cov,
            &self.strengths,
        ))
    }

    /// `-(1/2) int_0^tf p^T B p dtau` in closed form.
    pub fn log_weight(&self) -> f64 {
        let m = &self.diffusion;
        let tf = self.bc.tf;
        let a = self.alpha;
        let half_sum = 0.5 * (m.zeta() + m.upsilon());
        let (s2, c2) = (2.0 * tf).sin_cos();
        let u = 0.5 * (m.zeta() - m.upsilon());
        let g_cos = u * (a[0] * a[0] - a[1] * a[1]) + 2.0 * m.xi() * a[0] * a[1];
        let g_sin = 2.0 * u * a[0] * a[1] - m.xi() * (a[0] * a[0] - a[1] * a[1]);
        let integral = half_sum * a.norm_squared() * tf + g_cos * s2 / 2.0 + g_sin * (1.0 - c2) / 2.0;
        -0.5 * integral
    }

    pub fn sample(&self, grid: &[f64]) -> Result<PathSamples> {
        let mut out = PathSamples {
            stochastic_energy: self.stochastic_energy(),
            r2: (!self.strengths.is_position_only()).then(Vec::new),
            ..Default::default()
        };
        for &tau in grid {
            let q = self.q(tau)?;
            let p = self.p_unchecked(tau);
            let r = optimal_readout(q, p.into(), &self.cov, &self.strengths);
            out.tau.push(tau);
            out.q1.push(q[0]);
            out.q2.push(q[1]);
            out.p1.push(p[0]);
            out.p2.push(p[1]);
            out.r1.push(r.r1);
            if let (Some(v), Some(r2)) = (out.r2.as_mut(), r.r2) {
                v.push(r2);
            }
            out.energy.push(self.mechanical_energy(tau)?);
        }
        Ok(out)
    }

    /// Largest residual of Hamilton's equations over `grid`, derivatives from
    /// five-point central differences.
    pub fn hamilton_residual(&self, grid: &[f64]) -> f64 {
        // Paths vary on the oscillator period whatever tf is; at this step the
        // stencil's truncation and roundoff errors are both near 1e-12 |p|.
        let h = 1e-3;
        let m = &self.diffusion;
        let d = |f: &dyn Fn(f64) -> Vec2, t: f64| {
            (f(t - 2.0 * h) - f(t - h) * 8.0 + f(t + h) * 8.0 - f(t + 2.0 * h)) / (12.0 * h)
        };
        let qf = |t: f64| self.q_unchecked(t);
        let pf = |t: f64| self.p_unchecked(t);
        grid.iter()
            .map(|&t| {
                let q = self.q_unchecked(t);
                let p = self.p_unchecked(t);
                let rq = d(&qf, t) - (m.diffusion * p + m.omega * q);
                let rp = d(&pf, t) - m.omega * p;
                rq.amax().max(rp.amax())
            })
            .fold(0.0, f64::max)
    }
}

/// Independent closed form matching the regime, used for cross-validation.
pub fn solve_op_closed_form(bc: &BoundaryConditions, s: &Strengths) -> Result<OptimalPathSolution> {
    match s.regime() {
        Regime::Equal(t) => solve_op_equal(bc, t),
        Regime::PositionOnly(t) => solve_op_position_only(bc, t),
        Regime::General => solve_op_general(bc, s),
    }
}
