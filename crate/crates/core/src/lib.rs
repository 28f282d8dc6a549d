//! Probability density evolution for nonlinear oscillators under coloured
//! Gaussian excitation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod coefficients;
pub mod compare;
pub mod dynamics;
pub mod error;
pub mod excitation;
pub mod grid;
pub mod montecarlo;
pub mod propagator;
pub mod quadrature;
pub mod solver;

pub use error::{Error, Result};
