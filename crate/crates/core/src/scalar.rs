//! Floating-point abstraction shared by the function algebra.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal into the scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Relative tolerance used when comparing values produced by the algebra.
    fn rel_eps() -> Self;

    /// `true` when `a` and `b` agree up to `rel_eps` relative to their magnitude.
    fn near(a: Self, b: Self) -> bool {
        if !(a.is_finite() && b.is_finite()) {
            return a == b;
        }
        let scale = Self::one() + a.abs().max(b.abs());
        (a - b).abs() <= Self::rel_eps() * scale
    }
}

impl Scalar for f32 {
    fn rel_eps() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    fn rel_eps() -> Self {
        1e-12
    }
}
