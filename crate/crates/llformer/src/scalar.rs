use std::fmt::{Debug, Display};
use std::ops::AddAssign;

/// Element type for tensors: f32 for real workloads, f64 for gradient checks.
///
/// Everything numeric the engine needs beyond `num_traits::Float` lives here,
/// so model code can stay generic without per-dtype special cases.
pub trait Scalar:
    num_traits::Float + AddAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Gauss error function; the f32 impl evaluates in f64 and casts, which
    /// keeps it monotone and accurate to well below f32 epsilon.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
