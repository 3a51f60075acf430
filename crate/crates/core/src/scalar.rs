//! Scalar abstraction for the numeric core.
//!
//! Distribution arithmetic (residuals, normalization, inverse-CDF lookup)
//! only needs an ordered field, so it is generic over [`Scalar`] and works
//! with exact rationals as well as floats. Operations that need
//! transcendental functions (cosine similarity, routing scores) require
//! the tighter [`Real`] bound. The engine runs on `f64`; the exact
//! rational instantiation backs enumeration tests where floating-point
//! rounding would muddy the verdict.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, Signed, Zero};

/// An ordered field with a crate-wide normalization tolerance.
pub trait Scalar: Num + Signed + PartialOrd + Clone + std::fmt::Debug {
    /// Tolerance for |sum(probs) - 1| when validating a distribution.
    /// Exact types return zero.
    fn norm_tolerance() -> Self;

    /// Exact conversion from an `f64` probability, where the type permits it.
    fn from_prob(p: f64) -> Self;
}

impl Scalar for f64 {
    fn norm_tolerance() -> Self {
        1e-9
    }

    fn from_prob(p: f64) -> Self {
        p
    }
}

impl Scalar for f32 {
    fn norm_tolerance() -> Self {
        1e-6
    }

    fn from_prob(p: f64) -> Self {
        p as f32
    }
}

impl Scalar for BigRational {
    fn norm_tolerance() -> Self {
        Zero::zero()
    }

    /// Every finite `f64` is a dyadic rational, so this is lossless.
    fn from_prob(p: f64) -> Self {
        BigRational::from_float(p).unwrap_or_else(|| BigRational::from_integer(BigInt::from(0)))
    }
}

/// Floating-point scalar: everything in [`Scalar`] plus `sqrt`, casts, etc.
pub trait Real: Scalar + Float + FromPrimitive {}

impl<T: Scalar + Float + FromPrimitive> Real for T {}
