//! Numerically stable higher-order influence function (sHOIF) estimators for
//! doubly robust functionals, with exact U-statistic engines, a finite-state
//! ground-truth oracle, a bias-testing inference layer, and a Monte Carlo
//! harness.
//!
//! The crate is organized around the pipeline
//!
//! ```text
//! dictionary -> kernels -> ustats -> estimators -> inference
//!                   \________ oracle / sim / cli ________/
//! ```
//!
//! * [`dictionary`] builds and evaluates local polynomial partition bases.
//! * [`kernels`] holds weighted sample Gram matrices and the SVD-stabilized
//!   projection kernel that never forms the inverse Gram explicitly.
//! * [`ustats`] evaluates the distinct-index U-statistics exactly, both by
//!   brute force and by Möbius inversion over coincidence partitions, and
//!   houses the exact combinatorial identities (Stirling numbers, the
//!   cancellation coefficient).
//! * [`estimators`] assembles the first-order estimator and the
//!   sHOIF / eHOIF / oracle-Ω correction hierarchy.
//! * [`oracle`] computes exact population functionals on finite-state data
//!   generating processes.
//! * [`inference`] provides bootstrap standard errors, Wald intervals and the
//!   one-sided bias test.
//! * [`sim`] generates synthetic data, perturbs nuisances at controlled rates
//!   and runs replication grids.
//! * [`cli`] implements the `shoif` command line surface.
//!
//! Numeric code is generic over the scalar type through the [`Scalar`] trait;
//! `f64` is the default everywhere and the concrete aliases below pin the
//! types used by the CLI and the harness.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub mod cli;
pub mod dictionary;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod kernels;
pub mod oracle;
pub mod sim;
pub mod ustats;

pub use error::{Error, Result};

/// Scalar type the numeric core is generic over. Implemented for `f32` and
/// `f64`; all tolerances in this crate are stated for `f64`.
pub trait Scalar:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + std::fmt::LowerExp
{
    /// Lossless-enough conversion from an `f64` literal.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }
}

impl<T> Scalar for T where
    T: RealField + Copy + Default + FromPrimitive + ToPrimitive + std::fmt::LowerExp
{
}

/// Default scalar used by the CLI, the harness and the serialized formats.
pub type Real = f64;
/// Dense vector over the default scalar.
pub type RVector = nalgebra::DVector<Real>;
/// Dense column-major matrix over the default scalar.
pub type RMatrix = nalgebra::DMatrix<Real>;
