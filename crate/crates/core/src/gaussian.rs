//! Gaussian oscillator states, measurement strengths and the steady-state
//! covariance.
//!
//! All quantities are dimensionless: positions and momenta are scaled by the
//! oscillator length and momentum units, time by the inverse frequency.

use alloc::format;
use alloc::string::String;

use num_complex::Complex64;
// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::{Mat2, Vec2};

/// Relative difference of the two collapse timescales below which they are
/// treated as equal.
pub const EQUAL_STRENGTH_REL_TOL: f64 = 1e-12;

/// Slack allowed on the Heisenberg bound for numerically evolved states.
pub const HEISENBERG_TOL: f64 = 1e-9;

/// Covariance part of a Gaussian state: `q3 = 2 var(X)`, `q4` the symmetrized
/// covariance, `q5 = 2 var(P)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance {
    pub q3: f64,
    pub q4: f64,
    pub q5: f64,
}

impl Covariance {
    /// Coherent-state covariance.
    pub const IDENTITY: Covariance = Covariance { q3: 1.0, q4: 0.0, q5: 1.0 };

    pub const fn new(q3: f64, q4: f64, q5: f64) -> Self {
        Self { q3, q4, q5 }
    }

    /// `q3 q5 - q4^2`, equal to one for pure states.
    pub fn det(&self) -> f64 {
        self.q3 * self.q5 - self.q4 * self.q4
    }

    pub fn matrix(&self) -> Mat2 {
        Mat2::new(self.q3, self.q4, self.q4, self.q5)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.q3, self.q4, self.q5]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Checks positivity of the variances and the Heisenberg bound
    /// `q3 q5 - q4^2 >= 1 - tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if !(self.q3 > 0.0 && self.q5 > 0.0) {
            return Err(Error::InvalidState(format!(
                "variances must be positive (q3 = {}, q5 = {})",
                self.q3, self.q5
            )));
        }
        let det = self.det();
        if !(det >= 1.0 - tol) {
            return Err(Error::InvalidState(format!(
                "Heisenberg bound violated: q3 q5 - q4^2 = {det}"
            )));
        }
        Ok(())
    }
}

/// Full Gaussian state: mean quadratures plus covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianState {
    pub q1: f64,
    pub q2: f64,
    pub cov: Covariance,
}

impl GaussianState {
    /// Validated constructor.
    pub fn new(q1: f64, q2: f64, q3: f64, q4: f64, q5: f64) -> Result<Self> {
        let state = Self { q1, q2, cov: Covariance::new(q3, q4, q5) };
        state.validate()?;
        Ok(state)
    }

    /// Coherent state centred on `(q1, q2)`.
    pub fn coherent(q1: f64, q2: f64) -> Self {
        Self { q1, q2, cov: Covariance::IDENTITY }
    }

    pub fn with_covariance(q1: f64, q2: f64, cov: Covariance) -> Self {
        Self { q1, q2, cov }
    }

    pub fn mean(&self) -> Vec2 {
        Vec2::new(self.q1, self.q2)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.q1, self.q2, self.cov.q3, self.cov.q4, self.cov.q5]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q1.is_finite() && self.q2.is_finite()) {
            return Err(Error::InvalidState(String::from("non-finite quadratures")));
        }
        self.cov.validate(HEISENBERG_TOL)
    }
}

/// Momentum collapse timescale; `Infinite` means no momentum measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau2 {
    Finite(f64),
    Infinite,
}

/// Which closed forms apply to a pair of collapse timescales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    /// `tau1 == tau2 == T`.
    Equal(f64),
    General,
    /// Position measurement only, `tau1 == T`.
    PositionOnly(f64),
}

/// Validated pair of collapse timescales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Strengths {
    tau1: f64,
    tau2: Tau2,
}

impl Strengths {
    pub fn new(tau1: f64, tau2: Tau2) -> Result<Self> {
        if !(tau1 > 0.0 && tau1.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau1 must be positive and finite, got {tau1}")));
        }
        if let Tau2::Finite(t2) = tau2 {
            if !(t2 > 0.0 && t2.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "tau2 must be positive and finite (use Tau2::Infinite for position-only), got {t2}"
                )));
            }
        }
        Ok(Self { tau1, tau2 })
    }

    pub fn equal(t: f64) -> Result<Self> {
        Self::new(t, Tau2::Finite(t))
    }

    pub fn general(tau1: f64, tau2: f64) -> Result<Self> {
        Self::new(tau1, Tau2::Finite(tau2))
    }

    pub fn position_only(t: f64) -> Result<Self> {
        Self::new(t, Tau2::Infinite)
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn tau2(&self) -> Tau2 {
        self.tau2
    }

    pub fn is_position_only(&self) -> bool {
        matches!(self.tau2, Tau2::Infinite)
    }

    /// `1 / tau2`, zero without momentum measurement.
    pub fn inv_tau2(&self) -> f64 {
        match self.tau2 {
            Tau2::Finite(t2) => 1.0 / t2,
            Tau2::Infinite => 0.0,
        }
    }

    /// `1 / sqrt(tau2)`, zero without momentum measurement.
    pub fn inv_sqrt_tau2(&self) -> f64 {
        match self.tau2 {
            Tau2::Finite(t2) => 1.0 / t2.sqrt(),
            Tau2::Infinite => 0.0,
        }
    }

    /// Smallest collapse timescale.
    pub fn min_tau(&self) -> f64 {
        match self.tau2 {
            Tau2::Finite(t2) => self.tau1.min(t2),
            Tau2::Infinite => self.tau1,
        }
    }

    pub fn regime(&self) -> Regime {
        match self.tau2 {
            Tau2::Infinite => Regime::PositionOnly(self.tau1),
            Tau2::Finite(t2) => {
                let t1 = self.tau1;
                if t1 == t2 || (t1 - t2).abs() <= EQUAL_STRENGTH_REL_TOL * t1.max(t2) {
                    Regime::Equal(t1)
                } else {
                    Regime::General
                }
            }
        }
    }
}

/// Collapse timescales together with the integration grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasurementConfig {
    strengths: Strengths,
    dt: f64,
    tf: f64,
}

impl MeasurementConfig {
    pub fn new(strengths: Strengths, dt: f64, tf: f64) -> Result<Self> {
        if !(tf > 0.0 && tf.is_finite()) {
            return Err(Error::InvalidConfig(format!("tf must be positive, got {tf}")));
        }
        if !(dt > 0.0 && dt <= tf) {
            return Err(Error::InvalidConfig(format!("dt must lie in (0, tf], got dt = {dt}, tf = {tf}")));
        }
        Ok(Self { strengths, dt, tf })
    }

    /// Configuration with the default stochastic-simulation step.
    pub fn with_default_dt(strengths: Strengths, tf: f64) -> Result<Self> {
        Self::new(strengths, default_simulation_dt(&strengths).min(tf), tf)
    }

    pub fn strengths(&self) -> &Strengths {
        &self.strengths
    }

    pub fn tau1(&self) -> f64 {
        self.strengths.tau1
    }

    pub fn tau2(&self) -> Tau2 {
        self.strengths.tau2
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn with_dt(self, dt: f64) -> Result<Self> {
        Self::new(self.strengths, dt, self.tf)
    }

    pub fn with_tf(self, tf: f64) -> Result<Self> {
        Self::new(self.strengths, self.dt, tf)
    }

    /// Number of fixed steps covering `[0, tf]`, i.e. `ceil(tf / dt)`.
    pub fn steps(&self) -> usize {
        let ratio = self.tf / self.dt;
        let n = (ratio - 1e-9 * ratio.max(1.0)).ceil();
        (n as usize).max(1)
    }

    /// Uniform step `tf / steps()`, never larger than `dt`.
    pub fn step_size(&self) -> f64 {
        self.tf / self.steps() as f64
    }

    /// A message when `dt` is not small against the collapse timescales.
    pub fn weak_measurement_warning(&self) -> Option<String> {
        let limit = self.strengths.min_tau() / 50.0;
        (self.dt > limit).then(|| {
            format!(
                "dt = {} exceeds min(tau1, tau2)/50 = {limit}; the weak-measurement expansion may be inaccurate",
                self.dt
            )
        })
    }
}

/// Default step for stochastic simulation, `1e-3 min(tau1, tau2, 1)`.
pub fn default_simulation_dt(s: &Strengths) -> f64 {
    1e-3 * s.min_tau().min(1.0)
}

/// Default step for covariance integration, `min(tau1, tau2) / 200`.
pub fn default_covariance_dt(s: &Strengths) -> f64 {
    s.min_tau() / 200.0
}

/// Unique steady state of the covariance equations.
///
/// Equal strengths return `(1, 0, 1)` exactly. For position-only measurement
/// with `tau1 = T`, `q4 = sqrt(1 + 4T^2) - 2T`, `q3 = sqrt(4 T q4)` and
/// `q5 = sqrt(q4 (1 + 4T^2) / T)`.
pub fn fixed_point_covariance(s: &Strengths) -> Covariance {
    match s.regime() {
        Regime::Equal(_) => Covariance::IDENTITY,
        Regime::PositionOnly(t) => {
            let root = (1.0 + 4.0 * t * t).sqrt();
            // sqrt(1 + 4T^2) - 2T without cancellation at large T
            let q4 = 1.0 / (root + 2.0 * t);
            let q3 = (4.0 * t * q4).sqrt();
            let q5 = (q4 * (1.0 + 4.0 * t * t) / t).sqrt();
            Covariance::new(q3, q4, q5)
        }
        Regime::General => {
            let t1 = s.tau1;
            let t2 = match s.tau2 {
                Tau2::Finite(t2) => t2,
                Tau2::Infinite => unreachable!("position-only handled above"),
            };
            let g1 = 1.0 + 4.0 * t1 * t2;
            let g2 = 1.0 - t1 / t2;
            let a = g1 / t2;
            // q4 / g2 with the difference of square roots rationalized.
            let ratio = 2.0 / ((a * a + 4.0 * g2 * g2).sqrt() + a);
            let q4 = g2 * ratio;
            let q3 = (4.0 * t1 * ratio * (1.0 + 1.0 / (4.0 * t2 * t2))).sqrt();
            let q5 = ((1.0 + 4.0 * t1 * t1) * ratio / t1).sqrt();
            Covariance::new(q3, q4, q5)
        }
    }
}

/// Drift generator, noise coupling `b` and diffusion tensor `B = b b^T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionMatrices {
    pub omega: Mat2,
    pub b: Mat2,
    pub diffusion: Mat2,
}

impl DiffusionMatrices {
    /// `B_11`.
    pub fn zeta(&self) -> f64 {
        self.diffusion[(0, 0)]
    }

    /// `B_12 = B_21`.
    pub fn xi(&self) -> f64 {
        self.diffusion[(0, 1)]
    }

    /// `B_22`.
    pub fn upsilon(&self) -> f64 {
        self.diffusion[(1, 1)]
    }
}

/// Symplectic rotation generator of the free oscillator.
pub fn omega() -> Mat2 {
    Mat2::new(0.0, 1.0, -1.0, 0.0)
}

pub fn diffusion_matrices(cov: &Covariance, s: &Strengths) -> DiffusionMatrices {
    let c1 = 0.5 / s.tau1.sqrt();
    let c2 = 0.5 * s.inv_sqrt_tau2();
    let b = Mat2::new(cov.q3 * c1, cov.q4 * c2, cov.q4 * c1, cov.q5 * c2);
    DiffusionMatrices { omega: omega(), b, diffusion: b * b.transpose() }
}

/// Mean and covariance entering the characteristic function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharacteristicFunctionParams {
    pub mu: Vec2,
    pub gamma: Mat2,
}

impl CharacteristicFunctionParams {
    pub fn new(mu: Vec2, gamma: Mat2) -> Result<Self> {
        let sym = (gamma[(0, 1)] - gamma[(1, 0)]).abs();
        if sym > 1e-12 * gamma.abs().max().max(1.0) {
            return Err(Error::InvalidState(String::from("covariance matrix is not symmetric")));
        }
        Covariance::new(gamma[(0, 0)], gamma[(0, 1)], gamma[(1, 1)]).validate(HEISENBERG_TOL)?;
        Ok(Self { mu, gamma })
    }
}

impl From<&GaussianState> for CharacteristicFunctionParams {
    fn from(s: &GaussianState) -> Self {
        Self { mu: s.mean(), gamma: s.cov.matrix() }
    }
}

/// `ln chi(xi) = -xi^T Gamma xi / 4 + i mu^T xi`.
pub fn characteristic_exponent(params: &CharacteristicFunctionParams, xi: Vec2) -> Complex64 {
    let quad = xi.dot(&(params.gamma * xi));
    Complex64::new(-0.25 * quad, params.mu.dot(&xi))
}

pub fn characteristic_function(params: &CharacteristicFunctionParams, xi: Vec2) -> Complex64 {
    characteristic_exponent(params, xi).exp()
}

/// Local information-gain rate `q3 / 4 tau1 + q5 / 4 tau2`.
pub fn info_gain_rate(cov: &Covariance, s: &Strengths) -> f64 {
    cov.q3 / (4.0 * s.tau1) + cov.q5 * s.inv_tau2() / 4.0
}

/// Expected mechanical energy `(q3 + q5)/4 + (q1^2 + q2^2)/2`.
pub fn mechanical_energy(state: &GaussianState) -> f64 {
    0.25 * (state.cov.q3 + state.cov.q5) + 0.5 * (state.q1 * state.q1 + state.q2 * state.q2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn equal_strength_fixed_point_is_exact() {
        for t in [0.1, 1.0, 7.5] {
            let fp = fixed_point_covariance(&Strengths::equal(t).unwrap());
            assert_eq!(fp, Covariance::IDENTITY);
        }
    }

    #[test]
    fn general_fixed_point_values() {
        let fp = fixed_point_covariance(&Strengths::general(0.7, 3.0).unwrap());
        assert!(close(fp.q3, 0.9323, 5e-5), "{fp:?}");
        assert!(close(fp.q4, 0.2316, 5e-5), "{fp:?}");
        assert!(close(fp.q5, 1.1301, 5e-5), "{fp:?}");
        assert!(close(fp.det(), 1.0, 1e-12));
    }

    #[test]
    fn position_only_fixed_point_values() {
        let fp = fixed_point_covariance(&Strengths::position_only(1.0).unwrap());
        let u = 5f64.sqrt() - 2.0;
        assert!(close(fp.q4, u, 1e-15));
        assert!(close(fp.q3, (4.0 * u).sqrt(), 1e-15));
        assert!(close(fp.q5, (5.0 * u).sqrt(), 1e-15));
        assert!(close(fp.q3, 0.9717, 5e-5) && close(fp.q5, 1.0864, 5e-5));
        assert!(close(fp.det(), 1.0, 1e-12));
    }

    #[test]
    fn near_equal_strengths_take_the_equal_branch() {
        let t = 2.0;
        let s = Strengths::general(t, t * (1.0 + 1e-14)).unwrap();
        assert_eq!(s.regime(), Regime::Equal(t));
        assert_eq!(fixed_point_covariance(&s), Covariance::IDENTITY);
        // just outside the threshold the rationalized general formula is still accurate
        let s = Strengths::general(t, t * (1.0 + 1e-9)).unwrap();
        assert_eq!(s.regime(), Regime::General);
        let fp = fixed_point_covariance(&s);
        assert!(close(fp.q3, 1.0, 1e-8) && close(fp.q4, 0.0, 1e-8) && close(fp.q5, 1.0, 1e-8));
    }

    #[test]
    fn rejects_non_positive_timescales() {
        assert!(Strengths::general(0.0, 1.0).is_err());
        assert!(Strengths::general(1.0, -2.0).is_err());
        assert!(Strengths::new(f64::INFINITY, Tau2::Infinite).is_err());
        let s = Strengths::equal(1.0).unwrap();
        assert!(MeasurementConfig::new(s, 0.0, 1.0).is_err());
        assert!(MeasurementConfig::new(s, 2.0, 1.0).is_err());
    }

    #[test]
    fn weak_measurement_warning_threshold() {
        let s = Strengths::general(0.5, 2.0).unwrap();
        assert!(MeasurementConfig::new(s, 0.01, 1.0).unwrap().weak_measurement_warning().is_none());
        assert!(MeasurementConfig::new(s, 0.011, 1.0).unwrap().weak_measurement_warning().is_some());
    }

    #[test]
    fn steps_cover_the_interval() {
        let s = Strengths::equal(1.0).unwrap();
        let cfg = MeasurementConfig::new(s, 1e-3, 5.0).unwrap();
        assert_eq!(cfg.steps(), 5000);
        let cfg = MeasurementConfig::new(s, 0.3, 1.0).unwrap();
        assert_eq!(cfg.steps(), 4);
        assert!(cfg.step_size() <= 0.3);
    }

    #[test]
    fn diffusion_at_equal_fixed_point_is_quarter_identity() {
        let s = Strengths::equal(1.0).unwrap();
        let d = diffusion_matrices(&Covariance::IDENTITY, &s);
        assert!((d.diffusion - Mat2::identity() * 0.25).abs().max() < 1e-15);
    }

    #[test]
    fn diffusion_position_only_has_no_second_column() {
        let s = Strengths::position_only(1.0).unwrap();
        let d = diffusion_matrices(&Covariance::IDENTITY, &s);
        assert_eq!(d.b[(0, 1)], 0.0);
        assert_eq!(d.b[(1, 1)], 0.0);
        assert!((d.diffusion - Mat2::new(0.25, 0.0, 0.0, 0.0)).abs().max() < 1e-15);
    }

    #[test]
    fn diffusion_determinant_at_general_fixed_point() {
        let s = Strengths::general(0.7, 3.0).unwrap();
        let d = diffusion_matrices(&fixed_point_covariance(&s), &s);
        let lhs = d.zeta() * d.upsilon() - d.xi() * d.xi();
        assert!(close(lhs, 1.0 / (16.0 * 2.1), 1e-12), "{lhs}");
        assert!(close(lhs, 0.029762, 1e-6));
    }

    #[test]
    fn characteristic_function_examples() {
        let p = CharacteristicFunctionParams::new(Vec2::new(0.0, 0.0), Mat2::identity()).unwrap();
        assert_eq!(characteristic_function(&p, Vec2::zeros()), Complex64::new(1.0, 0.0));
        let v = characteristic_function(&p, Vec2::new(2.0, 0.0));
        assert!(close(v.re, (-1.0f64).exp(), 1e-15) && v.im.abs() < 1e-15);

        let p = CharacteristicFunctionParams::new(Vec2::new(3.0, 4.0), Mat2::identity()).unwrap();
        let v = characteristic_function(&p, Vec2::new(1.0, 1.0));
        let expect = Complex64::from_polar((-0.5f64).exp(), 7.0);
        assert!((v - expect).norm() < 1e-14);
    }

    #[test]
    fn characteristic_params_reject_unphysical_gamma() {
        assert!(CharacteristicFunctionParams::new(Vec2::zeros(), Mat2::identity() * 0.5).is_err());
        assert!(CharacteristicFunctionParams::new(Vec2::zeros(), Mat2::new(1.0, 0.2, 0.0, 1.0)).is_err());
    }

    #[test]
    fn info_gain_examples() {
        let eq = Strengths::equal(1.0).unwrap();
        assert!(close(info_gain_rate(&Covariance::IDENTITY, &eq), 0.5, 1e-15));
        let po = Strengths::position_only(1.0).unwrap();
        assert!(close(info_gain_rate(&Covariance::IDENTITY, &po), 0.25, 1e-15));
        let g = Strengths::general(0.7, 3.0).unwrap();
        let fp = fixed_point_covariance(&g);
        let expect = fp.q3 / 2.8 + fp.q5 / 12.0;
        assert!(close(info_gain_rate(&fp, &g), expect, 1e-15));
        assert!(close(expect, 0.4271, 5e-4));
    }

    #[test]
    fn mechanical_energy_examples() {
        assert!(close(mechanical_energy(&GaussianState::coherent(0.0, 0.0)), 0.5, 1e-15));
        assert!(close(mechanical_energy(&GaussianState::coherent(3.0, 4.0)), 13.0, 1e-15));
        let fp = fixed_point_covariance(&Strengths::general(0.7, 3.0).unwrap());
        let e = mechanical_energy(&GaussianState::with_covariance(0.0, 0.0, fp));
        assert!(close(e, 0.25 * (fp.q3 + fp.q5), 1e-15) && close(e, 0.5156, 1e-4));
    }

    #[test]
    fn state_validation() {
        assert!(GaussianState::new(0.0, 0.0, 1.0, 0.0, 1.0).is_ok());
        assert!(GaussianState::new(0.0, 0.0, 1.0, 0.5, 1.0).is_err());
        assert!(GaussianState::new(0.0, 0.0, -1.0, 0.0, -1.0).is_err());
        assert!(GaussianState::new(f64::NAN, 0.0, 1.0, 0.0, 1.0).is_err());
    }
}
