//! Brute-force check of the Gaussian moment equations in a truncated number
//! basis, plus the single-step update of the characteristic function.
//!
//! Conventions: `X = (a + a^dag)/sqrt 2`, `P = i (a^dag - a)/sqrt 2`, coherent
//! amplitude `alpha = (q1 + i q2)/sqrt 2`. Measurement operators are
//! `c1 = X / (2 sqrt tau1)` and `c2 = P / (2 sqrt tau2)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::gaussian::{Covariance, GaussianState, Strengths};
use crate::trajectory::{simulate_trajectory, CovarianceMode, NoiseMode, Readout, SimOptions, StreamId};
use crate::Vec2;

pub const DEFAULT_DIM: usize = 60;
/// Levels at the top of the truncation whose population is monitored.
pub const LEAKAGE_LEVELS: usize = 5;
/// Abort threshold for that population.
pub const LEAKAGE_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Density matrix in the number basis, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FockDensityMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl FockDensityMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: alloc::vec![ZERO; dim * dim] }
    }

    /// `|psi><psi|` for unnormalized amplitudes `psi`.
    pub fn from_pure(psi: &[Complex64]) -> Self {
        let dim = psi.len();
        let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
        let mut rho = Self::zeros(dim);
        for m in 0..dim {
            for n in 0..dim {
                rho.data[m * dim + n] = psi[m] * psi[n].conj() / norm;
            }
        }
        rho
    }

    pub fn number_state(n: usize, dim: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::TruncationTooSmall { dim, required: n as f64 });
        }
        let mut psi = alloc::vec![ZERO; dim];
        psi[n] = Complex64::new(1.0, 0.0);
        Ok(Self::from_pure(&psi))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, m: usize, n: usize) -> Complex64 {
        self.data[m * self.dim + n]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|k| self.data[k * (self.dim + 1)]).sum()
    }

    /// `Tr rho^2`.
    pub fn purity(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Largest `|rho_mn - conj(rho_nm)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim;
        let mut e: f64 = 0.0;
        for m in 0..d {
            for n in m..d {
                e = e.max((self.data[m * d + n] - self.data[n * d + m].conj()).norm());
            }
        }
        e
    }

    /// Summed population of the top `levels` number states.
    pub fn top_population(&self, levels: usize) -> f64 {
        let d = self.dim;
        (d.saturating_sub(levels)..d).map(|k| self.data[k * (d + 1)].re).sum()
    }

    pub fn to_dmatrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }

    /// Smallest eigenvalue (Hermitian part).
    pub fn min_eigenvalue(&self) -> f64 {
        let m = self.to_dmatrix();
        let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        SymmetricEigen::new(h).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn scale(&mut self, f: f64) {
        for c in &mut self.data {
            *c *= f;
        }
    }

    fn symmetrize(&mut self) {
        let d = self.dim;
        for m in 0..d {
            let diag = self.data[m * d + m];
            self.data[m * d + m] = Complex64::new(diag.re, 0.0);
            for n in m + 1..d {
                let avg = 0.5 * (self.data[m * d + n] + self.data[n * d + m].conj());
                self.data[m * d + n] = avg;
                self.data[n * d + m] = avg.conj();
            }
        }
    }
}

/// `alpha = (q1 + i q2)/sqrt 2`.
pub fn coherent_amplitude(q1: f64, q2: f64) -> Complex64 {
    Complex64::new(q1, q2) / core::f64::consts::SQRT_2
}

/// Coherent state `|alpha>`; requires `|alpha|^2 + 6 |alpha| < dim`.
pub fn coherent_init(q1: f64, q2: f64, dim: usize) -> Result<FockDensityMatrix> {
    if !(q1.is_finite() && q2.is_finite()) {
        return Err(Error::InvalidState(alloc::format!("non-finite mean ({q1}, {q2})")));
    }
    let alpha = coherent_amplitude(q1, q2);
    let a = alpha.norm();
    let required = a * a + 6.0 * a;
    if !(required < dim as f64) {
        return Err(Error::TruncationTooSmall { dim, required });
    }
    let mut psi = alloc::vec![ZERO; dim];
    psi[0] = Complex64::new((-0.5 * a * a).exp(), 0.0);
    for n in 1..dim {
        psi[n] = psi[n - 1] * alpha / (n as f64).sqrt();
    }
    Ok(FockDensityMatrix::from_pure(&psi))
}

/// Off-diagonal `sqrt((k + 1)/2)` of `X` in the number basis.
fn ladder(dim: usize) -> Vec<f64> {
    (0..dim.saturating_sub(1)).map(|k| (0.5 * (k + 1) as f64).sqrt()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Quadrature {
    X,
    P,
}

/// `out = k Q a` for the tridiagonal `Q`.
fn left_mul(q: Quadrature, k: f64, off: &[f64], a: &[Complex64], out: &mut [Complex64], dim: usize) {
    // rows of X: x_{m-1} a_{m-1,.} + x_m a_{m+1,.}; P picks up i and -i
    let (up, dn) = match q {
        Quadrature::X => (Complex64::new(k, 0.0), Complex64::new(k, 0.0)),
        Quadrature::P => (I * k, -I * k),
    };
    for m in 0..dim {
        let row = &mut out[m * dim..(m + 1) * dim];
        row.fill(ZERO);
        if m > 0 {
            let f = up * off[m - 1];
            let src = &a[(m - 1) * dim..m * dim];
            for (o, s) in row.iter_mut().zip(src) {
                *o += f * s;
            }
        }
        if m + 1 < dim {
            let f = dn * off[m];
            let src = &a[(m + 1) * dim..(m + 2) * dim];
            for (o, s) in row.iter_mut().zip(src) {
                *o += f * s;
            }
        }
    }
}

/// `Tr(Q a)` for the tridiagonal `Q` (scaled by `k`).
fn trace_mul(q: Quadrature, k: f64, off: &[f64], a: &[Complex64], dim: usize) -> Complex64 {
    let mut acc = ZERO;
    for m in 0..dim.saturating_sub(1) {
        // Q_{m,m+1} a_{m+1,m} + Q_{m+1,m} a_{m,m+1}
        let lo = a[(m + 1) * dim + m];
        let hi = a[m * dim + m + 1];
        acc += match q {
            Quadrature::X => (lo + hi) * off[m],
            Quadrature::P => (-I * lo + I * hi) * off[m],
        };
    }
    acc * k
}

/// Moments `(q1, ..., q5)` of a density matrix.
pub fn extract_moments(rho: &FockDensityMatrix) -> GaussianState {
    let d = rho.dim;
    let off = ladder(d);
    let a = &rho.data;
    let tr = rho.trace().re;
    let mut y = alloc::vec![ZERO; d * d];
    let ex = trace_mul(Quadrature::X, 1.0, &off, a, d).re / tr;
    let ep = trace_mul(Quadrature::P, 1.0, &off, a, d).re / tr;
    left_mul(Quadrature::X, 1.0, &off, a, &mut y, d);
    let exx = trace_mul(Quadrature::X, 1.0, &off, &y, d).re / tr;
    // <PX>, and <XP> = conj(<PX>) for Hermitian rho
    let epx = trace_mul(Quadrature::P, 1.0, &off, &y, d).re / tr;
    left_mul(Quadrature::P, 1.0, &off, a, &mut y, d);
    let epp = trace_mul(Quadrature::P, 1.0, &off, &y, d).re / tr;
    GaussianState::with_covariance(
        ex,
        ep,
        Covariance::new(2.0 * (exx - ex * ex), 2.0 * epx - 2.0 * ex * ep, 2.0 * (epp - ep * ep)),
    )
}

/// Discretization of the stochastic master equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SmeScheme {
    /// Euler-Maruyama on the normalized equation.
    EulerMaruyama,
    /// First-order strong scheme written as `rho -> M rho M^dag / Tr`, with
    /// `M = 1 - sum c_j^2 dt / 2 + sum c_j dY_j
    ///      + sum_jk c_j c_k (dY_j dY_k - delta_jk dt) / 2`
    /// and `dY_j = 2 <c_j> dt + dW_j`, followed by the exact free rotation
    /// `exp(-i H dt)`. Positive by construction.
    #[default]
    Milstein,
}

/// Five diagonals of a banded matrix, `rows[m][d]` holding entry `(m, m + d - 2)`.
#[derive(Clone, Debug)]
struct Banded {
    rows: Vec<[Complex64; 5]>,
}

impl Banded {
    fn from_dense(m: &DMatrix<Complex64>) -> Self {
        let n = m.nrows();
        let rows = (0..n)
            .map(|i| {
                core::array::from_fn(|d| {
                    let j = i as isize + d as isize - 2;
                    if j >= 0 && (j as usize) < n { m[(i, j as usize)] } else { ZERO }
                })
            })
            .collect();
        Self { rows }
    }

    /// `out = self * a`.
    fn apply(&self, a: &[Complex64], out: &mut [Complex64], dim: usize) {
        for (m, row) in self.rows.iter().enumerate() {
            let dst = &mut out[m * dim..(m + 1) * dim];
            dst.fill(ZERO);
            for (d, f) in row.iter().enumerate() {
                let k = m as isize + d as isize - 2;
                if *f == ZERO || k < 0 || k as usize >= dim {
                    continue;
                }
                let src = &a[k as usize * dim..(k as usize + 1) * dim];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += f * s;
                }
            }
        }
    }
}

/// Operators entering `M`, each with the measurement rate folded in.
#[derive(Clone, Debug)]
struct MOperators {
    c: [Banded; 2],
    c_sq: [Banded; 2],
    /// `c1 c2 + c2 c1`
    anti: Banded,
}

fn dense_quadratures(dim: usize) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let off = ladder(dim);
    let mut x = DMatrix::<Complex64>::zeros(dim, dim);
    let mut p = DMatrix::<Complex64>::zeros(dim, dim);
    for (k, v) in off.iter().enumerate() {
        x[(k, k + 1)] = Complex64::new(*v, 0.0);
        x[(k + 1, k)] = Complex64::new(*v, 0.0);
        p[(k, k + 1)] = -I * *v;
        p[(k + 1, k)] = I * *v;
    }
    (x, p)
}

/// Reusable stepper with scratch buffers for one truncation size.
#[derive(Clone, Debug)]
pub struct SmeStepper {
    pub strengths: Strengths,
    pub dt: f64,
    pub scheme: SmeScheme,
    pub leakage_tol: f64,
    pub trace_tol: f64,
    dim: usize,
    off: Vec<f64>,
    ops: MOperators,
    /// `exp(-i k dt)` for `k = -(dim - 1) ..= dim - 1`
    phases: Vec<Complex64>,
    buf: [Vec<Complex64>; 3],
}

impl SmeStepper {
    pub fn new(strengths: Strengths, dt: f64, scheme: SmeScheme, dim: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!("dt must be positive, got {dt}")));
        }
        if dim < LEAKAGE_LEVELS + 2 {
            return Err(Error::TruncationTooSmall { dim, required: (LEAKAGE_LEVELS + 2) as f64 });
        }
        let (x, p) = dense_quadratures(dim);
        let c1 = x * Complex64::new(0.5 / strengths.tau1().sqrt(), 0.0);
        let c2 = p * Complex64::new(0.5 * strengths.inv_sqrt_tau2(), 0.0);
        let ops = MOperators {
            c_sq: [Banded::from_dense(&(&c1 * &c1)), Banded::from_dense(&(&c2 * &c2))],
            anti: Banded::from_dense(&(&c1 * &c2 + &c2 * &c1)),
            c: [Banded::from_dense(&c1), Banded::from_dense(&c2)],
        };
        Ok(Self {
            strengths,
            dt,
            scheme,
            leakage_tol: LEAKAGE_TOL,
            trace_tol: TRACE_TOL,
            dim,
            off: ladder(dim),
            ops,
            phases: (0..2 * dim - 1).map(|k| Complex64::from_polar(1.0, -(k as f64 - (dim - 1) as f64) * dt)).collect(),
            buf: core::array::from_fn(|_| alloc::vec![ZERO; dim * dim]),
        })
    }

    fn channels(&self) -> [(Quadrature, f64); 2] {
        [
            (Quadrature::X, 0.5 / self.strengths.tau1().sqrt()),
            (Quadrature::P, 0.5 * self.strengths.inv_sqrt_tau2()),
        ]
    }

    /// Advances `rho` by one step with Wiener increments `dw`.
    pub fn step(&mut self, rho: &mut FockDensityMatrix, dw: [f64; 2]) -> Result<()> {
        if rho.dim != self.dim {
            return Err(Error::InvalidArgument(alloc::format!("matrix dim {} vs stepper dim {}", rho.dim, self.dim)));
        }
        let channels = self.channels();
        let mut expect = [0.0; 2];
        for j in 0..2 {
            let (q, k) = channels[j];
            if k > 0.0 {
                expect[j] = trace_mul(q, k, &self.off, &rho.data, self.dim).re;
            }
        }
        match self.scheme {
            SmeScheme::EulerMaruyama => self.euler(rho, dw, expect)?,
            SmeScheme::Milstein => self.kraus_form(rho, dw, expect),
        }
        let tr = rho.trace().re;
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::TraceDrift { drift: tr });
        }
        rho.scale(1.0 / tr);
        rho.symmetrize();
        let top = rho.top_population(LEAKAGE_LEVELS);
        if top > self.leakage_tol {
            return Err(Error::Leakage { population: top });
        }
        Ok(())
    }

    fn kraus_form(&mut self, rho: &mut FockDensityMatrix, dw: [f64; 2], expect: [f64; 2]) {
        let d = self.dim;
        let dt = self.dt;
        let dy = [2.0 * expect[0] * dt + dw[0], 2.0 * expect[1] * dt + dw[1]];
        let ops = &self.ops;
        let mut m = Banded { rows: alloc::vec![[ZERO; 5]; d] };
        for (i, row) in m.rows.iter_mut().enumerate() {
            for b in 0..5 {
                let mut v = ZERO;
                for j in 0..2 {
                    v += ops.c[j].rows[i][b] * dy[j];
                    v += ops.c_sq[j].rows[i][b] * (0.5 * (dy[j] * dy[j] - dt) - 0.5 * dt);
                }
                v += ops.anti.rows[i][b] * (0.5 * dy[0] * dy[1]);
                row[b] = v;
            }
            row[2] += 1.0;
        }
        let [a, t, _] = &mut self.buf;
        // M rho M^dag = M (M rho)^dag for Hermitian rho
        m.apply(&rho.data, a, d);
        for i in 0..d {
            for j in 0..d {
                t[i * d + j] = a[j * d + i].conj();
            }
        }
        m.apply(t, &mut rho.data, d);
        // free rotation applied exactly
        for i in 0..d {
            for j in 0..d {
                rho.data[i * d + j] *= self.phases[(i as isize - j as isize + d as isize - 1) as usize];
            }
        }
    }

    fn euler(&mut self, rho: &mut FockDensityMatrix, dw: [f64; 2], expect: [f64; 2]) -> Result<()> {
        let d = self.dim;
        let dt = self.dt;
        let channels = self.channels();
        let mut out = rho.data.clone();
        // -i [H, rho] with H = n + 1/2
        for m in 0..d {
            for n in 0..d {
                out[m * d + n] += -I * ((m as f64 - n as f64) * dt) * rho.data[m * d + n];
            }
        }
        let [y, w, z] = &mut self.buf;
        for j in 0..2 {
            let (q, k) = channels[j];
            if k == 0.0 {
                continue;
            }
            // y = c rho, w = c^2 rho, z = c rho c
            left_mul(q, k, &self.off, &rho.data, y, d);
            left_mul(q, k, &self.off, y, w, d);
            let yt: Vec<Complex64> = (0..d * d).map(|idx| y[(idx % d) * d + idx / d].conj()).collect();
            left_mul(q, k, &self.off, &yt, z, d);
            for m in 0..d {
                for n in 0..d {
                    let idx = m * d + n;
                    let lind = z[idx] - 0.5 * (w[idx] + w[n * d + m].conj());
                    let g = y[idx] + y[n * d + m].conj();
                    out[idx] += lind * dt + (g - 2.0 * expect[j] * rho.data[idx]) * dw[j];
                }
            }
        }
        let tr = (0..d).map(|k| out[k * (d + 1)]).sum::<Complex64>();
        if (tr - 1.0).norm() > self.trace_tol {
            return Err(Error::TraceDrift { drift: (tr - 1.0).norm() });
        }
        rho.data = out;
        Ok(())
    }
}

/// One step of the stochastic master equation.
pub fn sme_step(
    rho: &FockDensityMatrix,
    s: &Strengths,
    dt: f64,
    dw: [f64; 2],
    scheme: SmeScheme,
) -> Result<FockDensityMatrix> {
    let mut stepper = SmeStepper::new(*s, dt, scheme, rho.dim)?;
    let mut out = rho.clone();
    stepper.step(&mut out, dw)?;
    Ok(out)
}

/// Order in which the two measurement operators act.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KrausOrder {
    /// `M_X M_P rho M_P^dag M_X^dag`.
    #[default]
    PThenX,
    /// `M_P M_X rho M_X^dag M_P^dag`.
    XThenP,
}

/// Spectral data of the truncated `X`, reused across Kraus steps.
#[derive(Clone, Debug)]
pub struct KrausOperators {
    dim: usize,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl KrausOperators {
    pub fn new(dim: usize) -> Self {
        let off = ladder(dim);
        let mut x = DMatrix::<f64>::zeros(dim, dim);
        for (k, v) in off.iter().enumerate() {
            x[(k, k + 1)] = *v;
            x[(k + 1, k)] = *v;
        }
        let eig = SymmetricEigen::new(x);
        Self { dim, eigenvalues: eig.eigenvalues.iter().copied().collect(), eigenvectors: eig.eigenvectors }
    }

    /// `exp(-dt (r - X)^2 / 4 tau)` without the constant prefactor.
    fn position_operator(&self, r: f64, dt: f64, tau: f64) -> DMatrix<Complex64> {
        let v = &self.eigenvectors;
        let f: Vec<f64> = self.eigenvalues.iter().map(|x| (-dt / (4.0 * tau) * (r - x).powi(2)).exp()).collect();
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, j| {
            Complex64::new((0..n).map(|k| v[(i, k)] * f[k] * v[(j, k)]).sum::<f64>(), 0.0)
        })
    }

    /// Momentum version via `P = D^dag X D` with `D = diag((-i)^n)`.
    fn momentum_operator(&self, r: f64, dt: f64, tau: f64) -> DMatrix<Complex64> {
        let mx = self.position_operator(r, dt, tau);
        let phase = |n: usize| match n % 4 {
            0 => Complex64::new(1.0, 0.0),
            1 => -I,
            2 => Complex64::new(-1.0, 0.0),
            _ => I,
        };
        DMatrix::from_fn(self.dim, self.dim, |i, j| phase(i).conj() * mx[(i, j)] * phase(j))
    }
}

/// Kraus update: measurement of both quadratures with readouts `r`, exact
/// free rotation, normalization.
pub fn kraus_step(
    rho: &FockDensityMatrix,
    ops: &KrausOperators,
    s: &Strengths,
    dt: f64,
    r: &Readout,
    order: KrausOrder,
) -> Result<FockDensityMatrix> {
    if ops.dim != rho.dim {
        return Err(Error::InvalidArgument("Kraus operators built for a different dimension".into()));
    }
    let d = rho.dim;
    let mut m = ops.position_operator(r.r1, dt, s.tau1());
    if let (Some(r2), false) = (r.r2, s.is_position_only()) {
        let tau2 = 1.0 / (s.inv_sqrt_tau2() * s.inv_sqrt_tau2());
        let mp = ops.momentum_operator(r2, dt, tau2);
        m = match order {
            KrausOrder::PThenX => m * mp,
            KrausOrder::XThenP => mp * m,
        };
    }
    let rho_m = rho.to_dmatrix();
    let new = &m * rho_m * m.adjoint();
    let mut out = FockDensityMatrix::zeros(d);
    for a in 0..d {
        for b in 0..d {
            let phase = Complex64::from_polar(1.0, -(a as f64 - b as f64) * dt);
            out.data[a * d + b] = new[(a, b)] * phase;
        }
    }
    let tr = out.trace().re;
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::TraceDrift { drift: tr });
    }
    out.scale(1.0 / tr);
    out.symmetrize();
    let top = out.top_population(LEAKAGE_LEVELS);
    if top > LEAKAGE_TOL {
        return Err(Error::Leakage { population: top });
    }
    Ok(out)
}

/// Readout prefactor in the linear part of `kappa`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KappaForm {
    /// `1/(2 tau)`, consistent with the Langevin equations for the means.
    #[default]
    Consistent,
    /// `1/(8 tau)`.
    QuarterReadout,
}

/// Exponent `kappa(xi)` of the one-step characteristic-function update
/// `chi -> chi exp(kappa dtau)`.
pub fn kappa(state: &GaussianState, xi: Vec2, r: &Readout, s: &Strengths, form: KappaForm) -> Complex64 {
    let GaussianState { q1, q2, cov } = *state;
    let Covariance { q3, q4, q5 } = cov;
    let (x1, x2) = (xi[0], xi[1]);
    let i1 = 1.0 / s.tau1();
    let i2 = s.inv_tau2();
    let u = q3 * x1 + q4 * x2;
    let v = q4 * x1 + q5 * x2;
    let quad = 0.5 * u * x2 - 0.5 * v * x1 - i2 / 8.0 * x1 * x1 - i1 / 8.0 * x2 * x2
        + i1 / 8.0 * u * u
        + i2 / 8.0 * v * v;
    let pref = match form {
        KappaForm::Consistent => 0.5,
        KappaForm::QuarterReadout => 0.125,
    };
    let w2 = match r.r2 {
        Some(r2) if !s.is_position_only() => r2 - q2,
        _ => 0.0,
    };
    let lin = -q1 * x2 + x1 * q2 + pref * i1 * u * (r.r1 - q1) + pref * i2 * v * w2;
    Complex64::new(quad, lin)
}

/// Multiplies the characteristic function by `exp(kappa dt)` and reads the
/// new moments off `ln chi = -xi^T Gamma xi / 4 + i mu^T xi` at probe points.
pub fn kappa_update_step_with(state: &GaussianState, r: &Readout, dt: f64, s: &Strengths, form: KappaForm) -> GaussianState {
    let k = |a: f64, b: f64| kappa(state, Vec2::new(a, b), r, s, form);
    let (k10, k01, k11) = (k(1.0, 0.0), k(0.0, 1.0), k(1.0, 1.0));
    let a11 = k10.re;
    let a22 = k01.re;
    let a12 = 0.5 * (k11.re - a11 - a22);
    let c = state.cov;
    GaussianState::with_covariance(
        state.q1 + dt * k10.im,
        state.q2 + dt * k01.im,
        Covariance::new(c.q3 - 4.0 * dt * a11, c.q4 - 4.0 * dt * a12, c.q5 - 4.0 * dt * a22),
    )
}

pub fn kappa_update_step(state: &GaussianState, r: &Readout, dt: f64, s: &Strengths) -> GaussianState {
    kappa_update_step_with(state, r, dt, s, KappaForm::Consistent)
}

/// Settings of a Gaussian-versus-Fock comparison run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    pub q1: f64,
    pub q2: f64,
    pub strengths: Strengths,
    pub dt: f64,
    pub tf: f64,
    pub dim: usize,
    pub scheme: SmeScheme,
    pub stream: StreamId,
    /// Store every `record_every`-th grid point.
    pub record_every: usize,
    pub leakage_tol: f64,
}

impl OracleConfig {
    pub fn new(q1: f64, q2: f64, strengths: Strengths, dt: f64, tf: f64) -> Self {
        Self {
            q1,
            q2,
            strengths,
            dt,
            tf,
            dim: DEFAULT_DIM,
            scheme: SmeScheme::default(),
            stream: StreamId { master_seed: 0, index: 0 },
            record_every: 100,
            leakage_tol: LEAKAGE_TOL,
        }
    }
}

/// Moments from both sides on a shared time grid, driven by the same noise.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleComparison {
    pub times: Vec<f64>,
    pub gaussian: Vec<[f64; 5]>,
    pub fock: Vec<[f64; 5]>,
    /// Max deviation of each moment over every step (not only stored ones).
    pub max_deviation: [f64; 5],
    pub min_purity: f64,
    pub max_top_population: f64,
    pub stream: StreamId,
}

impl OracleComparison {
    pub fn max_mean_deviation(&self) -> f64 {
        self.max_deviation[0].max(self.max_deviation[1])
    }

    pub fn max_covariance_deviation(&self) -> f64 {
        self.max_deviation[2].max(self.max_deviation[3]).max(self.max_deviation[4])
    }
}

/// Simulates the Gaussian equations from a coherent state, then replays the
/// recorded increments through the master equation.
pub fn run_oracle(config: &OracleConfig) -> Result<OracleComparison> {
    let cfg = crate::gaussian::MeasurementConfig::new(config.strengths, config.dt, config.tf)?;
    let init = GaussianState::coherent(config.q1, config.q2);
    let opts = SimOptions { covariance: CovarianceMode::Evolving, noise: NoiseMode::Gaussian };
    let rec = simulate_trajectory(&init, &cfg, opts, config.stream.master_seed, config.stream.index)?;
    let mut rho = coherent_init(config.q1, config.q2, config.dim)?;
    let mut stepper = SmeStepper::new(config.strengths, cfg.step_size(), config.scheme, config.dim)?;
    stepper.leakage_tol = config.leakage_tol;
    let every = config.record_every.max(1);
    let mut out = OracleComparison {
        times: Vec::new(),
        gaussian: Vec::new(),
        fock: Vec::new(),
        max_deviation: [0.0; 5],
        min_purity: 1.0,
        max_top_population: 0.0,
        stream: config.stream,
    };
    let n = rec.steps();
    for k in 0..=n {
        let g = GaussianState::with_covariance(rec.q1[k], rec.q2[k], rec.cov[k]).as_array();
        let f = extract_moments(&rho).as_array();
        for i in 0..5 {
            out.max_deviation[i] = out.max_deviation[i].max((g[i] - f[i]).abs());
        }
        if k % every == 0 || k == n {
            out.times.push(rec.times[k]);
            out.gaussian.push(g);
            out.fock.push(f);
            out.min_purity = out.min_purity.min(rho.purity());
            out.max_top_population = out.max_top_population.max(rho.top_population(LEAKAGE_LEVELS));
        }
        if k < n {
            stepper.step(&mut rho, [rec.dw1[k], rec.dw2[k]])?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::covariance_rhs;
    use crate::trajectory::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close5(a: [f64; 5], b: [f64; 5], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn number_state_moments() {
        let vac = FockDensityMatrix::number_state(0, 10).unwrap();
        assert!(close5(extract_moments(&vac).as_array(), [0.0, 0.0, 1.0, 0.0, 1.0], 1e-14));
        let one = FockDensityMatrix::number_state(1, 10).unwrap();
        assert!(close5(extract_moments(&one).as_array(), [0.0, 0.0, 3.0, 0.0, 3.0], 1e-14));
    }

    #[test]
    fn coherent_moments_and_cutoff() {
        let rho = coherent_init(3.0, 4.0, 60).unwrap();
        assert!(close5(extract_moments(&rho).as_array(), [3.0, 4.0, 1.0, 0.0, 1.0], 1e-8));
        assert!((rho.trace().re - 1.0).abs() < 1e-12);
        assert!((rho.purity() - 1.0).abs() < 1e-12);
        assert!(rho.hermiticity_error() < 1e-15);
        assert!(matches!(coherent_init(3.0, 4.0, 10), Err(Error::TruncationTooSmall { .. })));
        let vac = coherent_init(0.0, 0.0, 8).unwrap();
        assert!((vac.get(0, 0).re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn momentum_operator_is_a_phase_conjugate_of_position() {
        let d = 12;
        let off = ladder(d);
        let rho = coherent_init(0.4, -0.9, d).unwrap();
        let mut px = alloc::vec![ZERO; d * d];
        left_mul(Quadrature::P, 1.0, &off, rho.as_slice(), &mut px, d);
        // P = D^dag X D with D = diag((-i)^n)
        let phase = |n: usize| Complex64::new(0.0, -1.0).powu(n as u32);
        for m in 0..d {
            for n in 0..d {
                let mut acc = ZERO;
                for k in [m.wrapping_sub(1), m + 1] {
                    if k < d {
                        let x = off[m.min(k)];
                        acc += phase(m).conj() * x * phase(k) * rho.get(k, n);
                    }
                }
                assert!((acc - px[m * d + n]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn noiseless_weak_limit_rotates() {
        let s = Strengths::equal(1e15).unwrap();
        let mut rho = coherent_init(1.0, 0.5, 30).unwrap();
        let mut st = SmeStepper::new(s, 1e-3, SmeScheme::EulerMaruyama, 30).unwrap();
        for _ in 0..1000 {
            st.step(&mut rho, [0.0, 0.0]).unwrap();
        }
        let m = extract_moments(&rho);
        let (sn, cs) = 1f64.sin_cos();
        assert!((m.q1 - (1.0 * cs + 0.5 * sn)).abs() < 2e-3);
        assert!((m.q2 - (-1.0 * sn + 0.5 * cs)).abs() < 2e-3);
    }

    #[test]
    fn steps_keep_trace_and_positivity() {
        let s = Strengths::equal(1.0).unwrap();
        for scheme in [SmeScheme::EulerMaruyama, SmeScheme::Milstein] {
            let mut rho = coherent_init(1.0, -1.0, 30).unwrap();
            let mut st = SmeStepper::new(s, 1e-3, scheme, 30).unwrap();
            let mut rng = stream_rng(5, 1);
            for _ in 0..500 {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                st.step(&mut rho, [z1 * 1e-3f64.sqrt(), z2 * 1e-3f64.sqrt()]).unwrap();
                assert!((rho.trace().re - 1.0).abs() < 1e-10);
                assert!(rho.hermiticity_error() < 1e-12);
            }
            let (lam, purity) = (rho.min_eigenvalue(), rho.purity());
            match scheme {
                SmeScheme::Milstein => {
                    assert!(lam > -1e-8, "{lam}");
                    assert!((purity - 1.0).abs() < 1e-3, "{purity}");
                }
                SmeScheme::EulerMaruyama => assert!(lam > -1e-2, "{lam}"),
            }
        }
    }

    #[test]
    fn leakage_is_detected() {
        let s = Strengths::equal(1.0).unwrap();
        let rho = coherent_init(0.0, 0.0, 10).unwrap();
        let mut bad = rho.clone();
        bad.data[9 * 10 + 9] = Complex64::new(1e-4, 0.0);
        assert!(matches!(sme_step(&bad, &s, 1e-3, [0.0, 0.0], SmeScheme::Milstein), Err(Error::Leakage { .. })));
    }

    #[test]
    fn on_signal_kraus_is_near_identity() {
        let s = Strengths::equal(1.0).unwrap();
        let ops = KrausOperators::new(40);
        let rho = coherent_init(1.0, 2.0, 40).unwrap();
        let m0 = extract_moments(&rho).as_array();
        let dt = 1e-6;
        let r = Readout { r1: 1.0, r2: Some(2.0) };
        let next = kraus_step(&rho, &ops, &s, dt, &r, KrausOrder::default()).unwrap();
        let m1 = extract_moments(&next).as_array();
        assert!(close5(m0, m1, 1e-5));
    }

    fn max_diff(a: [f64; 5], b: [f64; 5]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Log-slope of the one-step moment difference between two updates
    /// driven by the same increments `z sqrt(dt)`, between dt = 1e-3 and 1e-5.
    fn one_step_slope(f: impl Fn(f64, [f64; 2], &Readout) -> ([f64; 5], [f64; 5])) -> f64 {
        let rho = coherent_init(1.0, 0.5, 30).unwrap();
        let m0 = extract_moments(&rho);
        let z = [0.7, -1.2];
        let d: Vec<f64> = [1e-3, 1e-5]
            .iter()
            .map(|&dt| {
                let dw = [z[0] * dt.sqrt(), z[1] * dt.sqrt()];
                let r = Readout { r1: m0.q1 + dw[0] / dt, r2: Some(m0.q2 + dw[1] / dt) };
                let (a, b) = f(dt, dw, &r);
                max_diff(a, b)
            })
            .collect();
        (d[0] / d[1]).log10() / 2.0
    }

    #[test]
    fn kraus_and_sme_steps_agree_to_three_halves_order() {
        let s = Strengths::equal(1.0).unwrap();
        let ops = KrausOperators::new(30);
        let rho = coherent_init(1.0, 0.5, 30).unwrap();
        let kraus = |dt: f64, r: &Readout| {
            extract_moments(&kraus_step(&rho, &ops, &s, dt, r, KrausOrder::PThenX).unwrap()).as_array()
        };
        let mil = one_step_slope(|dt, dw, r| {
            (kraus(dt, r), extract_moments(&sme_step(&rho, &s, dt, dw, SmeScheme::Milstein).unwrap()).as_array())
        });
        assert!(mil > 1.45, "{mil}");
        // the explicit scheme misses the (dW^2 - dt) covariance kick
        let em = one_step_slope(|dt, dw, r| {
            (kraus(dt, r), extract_moments(&sme_step(&rho, &s, dt, dw, SmeScheme::EulerMaruyama).unwrap()).as_array())
        });
        assert!((em - 1.0).abs() < 0.05, "{em}");
        let order = one_step_slope(|dt, _, r| {
            let rev = kraus_step(&rho, &ops, &s, dt, r, KrausOrder::XThenP).unwrap();
            (kraus(dt, r), extract_moments(&rev).as_array())
        });
        assert!((order - 1.5).abs() < 0.05, "{order}");
    }

    #[test]
    fn kappa_covariance_part_reproduces_the_riccati_equations() {
        for s in [Strengths::general(0.7, 3.0).unwrap(), Strengths::position_only(1.2).unwrap()] {
            let st = GaussianState::new(0.3, -1.1, 2.5, 1.0, 5.5).unwrap();
            let dt = 1e-3;
            let rhs = covariance_rhs(&st.cov, &s);
            for r in [Readout { r1: 0.0, r2: Some(0.0) }, Readout { r1: 7.0, r2: Some(-3.0) }] {
                let next = kappa_update_step(&st, &r, dt, &s);
                let d = [next.cov.q3 - st.cov.q3, next.cov.q4 - st.cov.q4, next.cov.q5 - st.cov.q5];
                for i in 0..3 {
                    assert!((d[i] - dt * rhs[i]).abs() < 1e-14, "{i}: {} vs {}", d[i], dt * rhs[i]);
                }
            }
        }
    }

    #[test]
    fn kappa_means_match_the_langevin_step() {
        let s = Strengths::general(0.7, 3.0).unwrap();
        let st = GaussianState::new(0.3, -1.1, 2.5, 1.0, 5.5).unwrap();
        let dt = 1e-4;
        let dw = [0.013, -0.004];
        let (euler, r) = crate::trajectory::step(&st, &s, dt, dw, CovarianceMode::SteadyState);
        let next = kappa_update_step(&st, &r, dt, &s);
        assert!((next.q1 - euler.q1).abs() < 1e-13 && (next.q2 - euler.q2).abs() < 1e-13);
        let quarter = kappa_update_step_with(&st, &r, dt, &s, KappaForm::QuarterReadout);
        let kick = euler.q1 - st.q1 - st.q2 * dt;
        assert!((quarter.q1 - st.q1 - st.q2 * dt - 0.25 * kick).abs() < 1e-13);
        let still = kappa_update_step(&st, &Readout { r1: st.q1, r2: Some(st.q2) }, 0.0, &s);
        assert_eq!(still, st);
    }

    #[test]
    fn short_oracle_run_agrees() {
        let mut c = OracleConfig::new(1.0, -0.5, Strengths::equal(1.0).unwrap(), 2e-4, 0.5);
        c.dim = 30;
        let cmp = run_oracle(&c).unwrap();
        assert!(cmp.max_mean_deviation() < 1e-2, "{:?}", cmp.max_deviation);
        assert!(cmp.max_covariance_deviation() < 1e-2, "{:?}", cmp.max_deviation);
        assert!(cmp.min_purity > 1.0 - 1e-3);
    }
}
