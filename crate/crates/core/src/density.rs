//! Final-state probability densities: the closed Gaussian form, the form
//! obtained from the action of the optimal path, and histogram estimates
//! from simulated ensembles.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian::{diffusion_matrices, fixed_point_covariance, Strengths};
use crate::optimal_path::{globally_most_likely_endpoint, solve_op_general, uniform_grid, BoundaryConditions, DEFAULT_GRID_POINTS};
use crate::{Mat2, Vec2};

const TWO_PI: f64 = 2.0 * core::f64::consts::PI;

/// Gaussian density `sqrt(det S)/2pi exp(-dQ^T S dQ / 2)` of the final
/// quadratures, `dQ = q - center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticDensity {
    pub center: Vec2,
    /// Precision matrix `S`.
    pub sigma: Mat2,
    pub norm: f64,
}

/// One-dimensional Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marginal {
    pub mean: f64,
    pub variance: f64,
}

impl Marginal {
    pub fn pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        (-0.5 * d * d / self.variance).exp() / (TWO_PI * self.variance).sqrt()
    }
}

impl AnalyticDensity {
    pub fn from_precision(center: Vec2, sigma: Mat2) -> Result<Self> {
        let sym = (sigma[(0, 1)] - sigma[(1, 0)]).abs();
        let det = sigma.determinant();
        if !(sigma[(0, 0)] > 0.0 && det > 0.0) || sym > 1e-9 * sigma.abs().max() {
            return Err(Error::InvalidArgument(alloc::format!(
                "precision matrix is not symmetric positive definite: {sigma:?}"
            )));
        }
        let s = 0.5 * (sigma[(0, 1)] + sigma[(1, 0)]);
        let sigma = Mat2::new(sigma[(0, 0)], s, s, sigma[(1, 1)]);
        Ok(Self { center, sigma, norm: det.sqrt() / TWO_PI })
    }

    pub fn log_pdf(&self, q: Vec2) -> f64 {
        let d = q - self.center;
        self.norm.ln() - 0.5 * d.dot(&(self.sigma * d))
    }

    pub fn pdf(&self, q: Vec2) -> f64 {
        let d = q - self.center;
        self.norm * (-0.5 * d.dot(&(self.sigma * d))).exp()
    }

    /// Covariance of the final quadratures, `S^{-1}`.
    pub fn covariance(&self) -> Mat2 {
        let s = &self.sigma;
        Mat2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / s.determinant()
    }

    /// Marginals of `q1f` (precision `det S / S22`) and `q2f` (precision `det S / S11`).
    pub fn marginals(&self) -> (Marginal, Marginal) {
        let det = self.sigma.determinant();
        (
            Marginal { mean: self.center[0], variance: self.sigma[(1, 1)] / det },
            Marginal { mean: self.center[1], variance: self.sigma[(0, 0)] / det },
        )
    }

    /// Standard deviations of the two marginals.
    pub fn std_devs(&self) -> (f64, f64) {
        let (a, b) = self.marginals();
        (a.variance.sqrt(), b.variance.sqrt())
    }

    /// Draws one point.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let c = self.covariance();
        let l11 = c[(0, 0)].sqrt();
        let l21 = c[(1, 0)] / l11;
        let l22 = (c[(1, 1)] - l21 * l21).max(0.0).sqrt();
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        self.center + Vec2::new(l11 * z1, l21 * z1 + l22 * z2)
    }

    /// Rectangle `center +/- k` marginal standard deviations.
    pub fn window(&self, k: f64) -> Window {
        let (sx, sy) = self.std_devs();
        let c = self.center;
        Window { x: (c[0] - k * sx, c[0] + k * sx), y: (c[1] - k * sy, c[1] + k * sy) }
    }

    /// Probability mass in an axis-aligned rectangle, by a 4x4 Gauss-Legendre
    /// rule on `sub x sub` cells.
    pub fn rect_mass(&self, x: (f64, f64), y: (f64, f64), sub: usize) -> f64 {
        const NODES: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        const WEIGHTS: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        let sub = sub.max(1);
        let hx = (x.1 - x.0) / sub as f64;
        let hy = (y.1 - y.0) / sub as f64;
        let mut acc = 0.0;
        for i in 0..sub {
            let cx = x.0 + (i as f64 + 0.5) * hx;
            for j in 0..sub {
                let cy = y.0 + (j as f64 + 0.5) * hy;
                for (a, wa) in NODES.iter().zip(WEIGHTS.iter()) {
                    for (b, wb) in NODES.iter().zip(WEIGHTS.iter()) {
                        acc += wa * wb * self.pdf(Vec2::new(cx + 0.5 * hx * a, cy + 0.5 * hy * b));
                    }
                }
            }
        }
        acc * 0.25 * hx * hy
    }
}

/// Density for equal strengths `T`: `S = (4T/tf) I`.
pub fn analytic_density_equal(qi: Vec2, tf: f64, t: f64) -> Result<AnalyticDensity> {
    if !(tf > 0.0 && t > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("need tf > 0 and T > 0, got {tf}, {t}")));
    }
    let s = 4.0 * t / tf;
    AnalyticDensity::from_precision(globally_most_likely_endpoint(qi, tf), Mat2::identity() * s)
}

/// Density for arbitrary strengths: `S = A^{-T} K A^{-1}` with
/// `K = (zeta+upsilon)/2 tf I + sin(tf)/2 [[(zeta-upsilon) cos - 2 xi sin, (zeta-upsilon) sin + 2 xi cos],
/// [(zeta-upsilon) sin + 2 xi cos, -(zeta-upsilon) cos + 2 xi sin]]`.
pub fn analytic_density_general(qi: Vec2, tf: f64, s: &Strengths) -> Result<AnalyticDensity> {
    let bc = BoundaryConditions::new(qi, qi, tf)?;
    let sol = solve_op_general(&bc, s)?;
    let m = &sol.diffusion;
    let (zeta, xi, upsilon) = (m.zeta(), m.xi(), m.upsilon());
    let (sn, cs) = tf.sin_cos();
    let d = zeta - upsilon;
    let off = d * sn + 2.0 * xi * cs;
    let k = Mat2::identity() * (0.5 * (zeta + upsilon) * tf)
        + Mat2::new(d * cs - 2.0 * xi * sn, off, off, -d * cs + 2.0 * xi * sn) * (0.5 * sn);
    let a = sol.boundary;
    let a_inv = Mat2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / a.determinant();
    AnalyticDensity::from_precision(globally_most_likely_endpoint(qi, tf), a_inv.transpose() * k * a_inv)
}

/// Density at `qf` from the action of the optimal path ending there:
/// `sqrt(det S)/2pi exp(-(1/2) int_0^tf p^T B p dtau)`, the integral by
/// composite Simpson on `grid_points` nodes (odd).
pub fn path_action_density(qi: Vec2, qf: Vec2, tf: f64, s: &Strengths, grid_points: usize) -> Result<f64> {
    let n = if grid_points % 2 == 0 { grid_points + 1 } else { grid_points.max(3) };
    let sol = solve_op_general(&BoundaryConditions::new(qi, qf, tf)?, s)?;
    let b = diffusion_matrices(&fixed_point_covariance(s), s).diffusion;
    let grid = uniform_grid(tf, n);
    let h = tf / (n - 1) as f64;
    let mut acc = 0.0;
    for (k, &t) in grid.iter().enumerate() {
        let p = sol.p_unchecked(t);
        let w = if k == 0 || k == n - 1 { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * p.dot(&(b * p));
    }
    let action = acc * h / 3.0;
    let norm = analytic_density_general(qi, tf, s)?.norm;
    Ok(norm * (-0.5 * action).exp())
}

/// Same as [`path_action_density`] on the default grid.
pub fn path_action_density_default(qi: Vec2, qf: Vec2, tf: f64, s: &Strengths) -> Result<f64> {
    path_action_density(qi, qf, tf, s, DEFAULT_GRID_POINTS)
}

/// Nodes and weights of the `n`-point Gauss-Hermite rule for `int e^{-x^2} f(x) dx`,
/// from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (0.5 * k as f64).sqrt();
        j[(k, k - 1)] = off;
        j[(k - 1, k)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], core::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `int int P` by a tensor 64-point Gauss-Hermite rule in coordinates that
/// whiten the analytic covariance.
pub fn normalization_check(d: &AnalyticDensity) -> f64 {
    let (x, w) = gauss_hermite(64);
    let c = d.covariance();
    // q = center + sqrt(2) L y with L L^T = covariance
    let l11 = c[(0, 0)].sqrt();
    let l21 = c[(1, 0)] / l11;
    let l22 = (c[(1, 1)] - l21 * l21).sqrt();
    let jac = 2.0 * l11 * l22;
    let mut acc = 0.0;
    for (yi, wi) in x.iter().zip(w.iter()) {
        for (yj, wj) in x.iter().zip(w.iter()) {
            let q = d.center + Vec2::new(l11 * yi, l21 * yi + l22 * yj) * core::f64::consts::SQRT_2;
            acc += wi * wj * d.pdf(q) * (yi * yi + yj * yj).exp();
        }
    }
    acc * jac
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistogramSpec {
    pub bins_x: usize,
    pub bins_y: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins_x: 61, bins_y: 61 }
    }
}

/// Default half-width of the histogram window in standard deviations.
pub const DEFAULT_WINDOW_SIGMAS: f64 = 4.0;

/// Normalized 2-D histogram; bin `(i, j)` is stored at `i * bins_y + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDensity {
    pub window: Window,
    pub spec: HistogramSpec,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: Vec<f64>,
    /// Counts divided by (in-window count x bin area).
    pub values: Vec<f64>,
    pub total_samples: usize,
    pub in_window: usize,
}

impl EmpiricalDensity {
    pub fn bin_area(&self) -> f64 {
        (self.window.x.1 - self.window.x.0) / self.spec.bins_x as f64 * (self.window.y.1 - self.window.y.0)
            / self.spec.bins_y as f64
    }

    pub fn bin_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(0.5 * (self.x_edges[i] + self.x_edges[i + 1]), 0.5 * (self.y_edges[j] + self.y_edges[j + 1]))
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.bins_y + j]
    }
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

/// Histogram `samples` over `window`; points outside it are counted in
/// `total_samples` only.
pub fn empirical_density(samples: &[[f64; 2]], window: Window, spec: HistogramSpec) -> Result<EmpiricalDensity> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if spec.bins_x == 0 || spec.bins_y == 0 || !(window.x.1 > window.x.0 && window.y.1 > window.y.0) {
        return Err(Error::InvalidArgument(alloc::format!("degenerate histogram {spec:?} over {window:?}")));
    }
    let mut counts = alloc::vec![0.0; spec.bins_x * spec.bins_y];
    let wx = (window.x.1 - window.x.0) / spec.bins_x as f64;
    let wy = (window.y.1 - window.y.0) / spec.bins_y as f64;
    let mut in_window = 0usize;
    for s in samples {
        let fx = (s[0] - window.x.0) / wx;
        let fy = (s[1] - window.y.0) / wy;
        if fx >= 0.0 && fy >= 0.0 && fx < spec.bins_x as f64 && fy < spec.bins_y as f64 {
            counts[fx as usize * spec.bins_y + fy as usize] += 1.0;
            in_window += 1;
        }
    }
    if in_window == 0 {
        return Err(Error::EmptyWindow);
    }
    let scale = 1.0 / (in_window as f64 * wx * wy);
    let values = counts.iter().map(|c| c * scale).collect();
    Ok(EmpiricalDensity {
        window,
        spec,
        x_edges: edges(window.x.0, window.x.1, spec.bins_x),
        y_edges: edges(window.y.0, window.y.1, spec.bins_y),
        counts,
        values,
        total_samples: samples.len(),
        in_window,
    })
}

/// Histogram over the analytic `+/- 4 sigma` window with default binning.
pub fn empirical_density_for(samples: &[[f64; 2]], analytic: &AnalyticDensity) -> Result<EmpiricalDensity> {
    empirical_density(samples, analytic.window(DEFAULT_WINDOW_SIGMAS), HistogramSpec::default())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinComparison {
    pub i: usize,
    pub j: usize,
    pub observed: f64,
    pub expected: f64,
    /// Binomial z-score `(observed - expected) / sqrt(expected (1 - p))`.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityComparison {
    /// Largest `|z|` over bins with at least `min_expected` expected counts.
    pub max_abs_z: f64,
    pub bins_tested: usize,
    /// `(1/2) sum |p_hat - p|` over bins plus the analytic mass outside the window.
    pub tv_distance: f64,
    /// Expected value of `tv_distance` from sampling noise alone.
    pub tv_noise_floor: f64,
    pub bins: Vec<BinComparison>,
}

impl DensityComparison {
    /// `tv_distance` with the sampling-noise floor subtracted, clamped at zero.
    pub fn tv_excess(&self) -> f64 {
        (self.tv_distance - self.tv_noise_floor).max(0.0)
    }
}

/// Compares a histogram against an analytic density. Bin probabilities are
/// integrated exactly enough (Gauss-Legendre) that binning error is negligible.
pub fn density_distance(emp: &EmpiricalDensity, ana: &AnalyticDensity, min_expected: f64) -> DensityComparison {
    let n = emp.total_samples as f64;
    let mut bins = Vec::with_capacity(emp.counts.len());
    let mut tv = 0.0;
    let mut floor = 0.0;
    let mut inside = 0.0;
    let mut max_abs_z: f64 = 0.0;
    let mut tested = 0;
    for i in 0..emp.spec.bins_x {
        for j in 0..emp.spec.bins_y {
            let p = ana.rect_mass((emp.x_edges[i], emp.x_edges[i + 1]), (emp.y_edges[j], emp.y_edges[j + 1]), 1);
            inside += p;
            let observed = emp.counts[i * emp.spec.bins_y + j];
            let expected = n * p;
            let sd = (expected * (1.0 - p)).sqrt();
            let z = if sd > 0.0 { (observed - expected) / sd } else { 0.0 };
            if expected >= min_expected {
                max_abs_z = max_abs_z.max(z.abs());
                tested += 1;
            }
            tv += (observed / n - p).abs();
            floor += (2.0 * p * (1.0 - p) / (core::f64::consts::PI * n)).sqrt();
            bins.push(BinComparison { i, j, observed, expected, z });
        }
    }
    let outside_expected = (1.0 - inside).max(0.0);
    let outside_observed = (emp.total_samples - emp.in_window) as f64 / n;
    DensityComparison {
        max_abs_z,
        bins_tested: tested,
        tv_distance: 0.5 * (tv + (outside_observed - outside_expected).abs()),
        tv_noise_floor: 0.5 * floor,
        bins,
    }
}

/// `(1/2) sum |p_a - p_b|` between two histograms on the same grid.
pub fn histogram_distance(a: &EmpiricalDensity, b: &EmpiricalDensity) -> Result<f64> {
    if a.spec != b.spec || a.window != b.window {
        return Err(Error::GridMismatch("histograms use different bins".into()));
    }
    let (na, nb) = (a.total_samples as f64, b.total_samples as f64);
    Ok(0.5 * a.counts.iter().zip(b.counts.iter()).map(|(x, y)| (x / na - y / nb).abs()).sum::<f64>())
}
