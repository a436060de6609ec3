//! Gaussian-state simulation of a harmonic oscillator under continuous
//! measurement of one or both quadratures.
//!
//! Time is the dimensionless phase `tau = omega t`; quadratures are in units
//! where the ground-state variance is `1/2`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod covariance;
pub mod density;
pub mod error;
pub mod fock;
pub mod gaussian;
pub mod optimal_path;
pub mod postselect;
pub mod trajectory;

pub use error::{Error, Result};
pub use gaussian::{
    fixed_point_covariance, Covariance, GaussianState, MeasurementConfig, Regime, Strengths, Tau2,
};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
