//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::num::ParseFloatError;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real floating-point scalar: `f32` or `f64`.
///
/// Decimal text produced by `Display` parses back through `FromStr` to the
/// identical bit pattern, which the model file format relies on.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + FromStr<Err = ParseFloatError>
    + Send
    + Sync
    + 'static
{
    /// Relative max-norm error above which a filter factorization is rejected.
    fn factor_tolerance() -> Self;

    /// Absolute tolerance for probe-based certification of compiled networks.
    fn probe_tolerance() -> Self;

    /// Converts an `f64` literal. Panics only if the value is unrepresentable,
    /// which cannot happen for finite literals and the two implementors.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn factor_tolerance() -> Self {
        1e-6
    }

    fn probe_tolerance() -> Self {
        1e-6
    }
}

impl Scalar for f32 {
    fn factor_tolerance() -> Self {
        1e-3
    }

    fn probe_tolerance() -> Self {
        1e-2
    }
}
