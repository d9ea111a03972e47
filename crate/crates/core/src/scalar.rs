use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the numeric kernels are generic over.
///
/// `f64` is the workhorse (see [`crate::Real`]); `f32` satisfies the same
/// bound and is exercised in tests to keep the kernels type-agnostic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only on values outside the
    /// target type's range, which no kernel produces.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("scalar conversion from f64")
    }

    fn of_usize(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("scalar conversion from usize")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar conversion to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
