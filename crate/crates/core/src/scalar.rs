//! Floating-point scalar abstraction shared by the routing, insertion and
//! assignment code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumCast + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only for non-representable input,
    /// which cannot happen for finite `f64` into `f32`/`f64`.
    #[inline]
    fn of(value: f64) -> Self {
        <Self as NumCast>::from(value).expect("f64 converts into every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts into f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Total order on non-NaN scalars. NaN compares equal to everything, which
/// never matters because no code path produces NaN times or costs.
#[inline]
pub(crate) fn cmp_scalar<S: Scalar>(a: S, b: S) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
}
