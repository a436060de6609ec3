use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid measurement configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid Gaussian state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The covariance integrator produced an unphysical determinant.
    #[error("step size too large: det = {det} at tau = {tau} (dt = {dt})")]
    StepSize { tau: f64, det: f64, dt: f64 },

    /// A decay envelope was exceeded.
    #[error("bound violated at tau = {tau}: |lhs| = {lhs} > bound = {bound}")]
    BoundViolation { tau: f64, lhs: f64, bound: f64 },

    #[error("tau = {tau} outside [0, {tf}]")]
    OutOfRange { tau: f64, tf: f64 },

    #[error("boundary matrix is numerically singular (det = {det})")]
    SingularBoundaryMatrix { det: f64 },

    #[error(
        "post-selection stream exhausted after {trials} trials with {accepted} accepted \
         (acceptance rate {rate:.3e})"
    )]
    PoolExhausted { trials: u64, accepted: usize, rate: f64 },

    #[error("allocation of {requested} elements failed")]
    ResourceLimit { requested: usize },

    #[error("histogram window is empty")]
    EmptyWindow,

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("Fock truncation dim = {dim} too small (needs > {required:.1})")]
    TruncationTooSmall { dim: usize, required: f64 },

    #[error("trace drift {drift:.3e} exceeds tolerance in one step")]
    TraceDrift { drift: f64 },

    #[error("population {population:.3e} in the top truncation levels exceeds tolerance")]
    Leakage { population: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
