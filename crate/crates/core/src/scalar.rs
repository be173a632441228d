use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical core is generic over.
///
/// `nalgebra::RealField` supplies the transcendental functions and ordering;
/// the extra items here cover what `RealField` lacks: checked-free casts to
/// and from `f64` (used for constants, options, and serialization, which are
/// always `f64`) and the IEEE special values.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + std::iter::Sum<Self> + Default
{
    /// Cast a constant. Panics only for values outside the type's range,
    /// which never happens for the literals the crate feeds it.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    fn infinity() -> Self;
    fn neg_infinity() -> Self;

    /// Smallest positive normal value; `min_positive().ln()` serves as the
    /// finite stand-in for log(0).
    fn min_positive() -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn c(v: f64) -> Self {
                v as $t
            }
            fn f64(self) -> f64 {
                self as f64
            }
            fn infinity() -> Self {
                <$t>::INFINITY
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn min_positive() -> Self {
                <$t>::MIN_POSITIVE
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Sentinel for log-densities at points outside a distribution's support:
/// the most negative log value that still behaves arithmetically.
pub fn log_floor<S: Scalar>() -> S {
    S::min_positive().ln()
}

/// Numerically stable log(sum(exp(v))). Returns negative infinity for an
/// empty or all-negative-infinity input.
pub fn log_sum_exp<S: Scalar>(values: &[S]) -> S {
    let max = values
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, v| if v > a { v } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum: S = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
