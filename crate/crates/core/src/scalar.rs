//! Scalar precision abstraction: one run uses `f32` (training) or `f64`
//! (gradient checking), never a mix of tensors.

use num_traits::Float;

pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
