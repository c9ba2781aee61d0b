//! Scalar abstractions.
//!
//! The numeric kernels (grids, pooling, losses, the model) are written once
//! against [`Scalar`], a floating-point bound satisfied by `f32` and `f64`.
//! The evaluation metrics only need field arithmetic and an ordering, so they
//! are written against the weaker [`Field`] bound, which exact rational types
//! such as `num_rational::Ratio<i128>` also satisfy.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating-point scalar used by every differentiable kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Ordered field: enough structure for counting-based metrics.
pub trait Field: Num + Clone + PartialOrd + Debug {
    /// Embeds a non-negative integer count.
    fn count(n: usize) -> Self;

    fn half() -> Self {
        Self::one() / (Self::one() + Self::one())
    }
}

impl<T> Field for T
where
    T: Num + Clone + PartialOrd + Debug + FromPrimitive,
{
    fn count(n: usize) -> Self {
        T::from_usize(n).expect("count representable in field")
    }
}
