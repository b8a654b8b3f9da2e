//! Scalar abstraction so the numeric stack works at f32 and f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type for tensors, parameters, and densities.
///
/// Everything the crate needs from a scalar: IEEE float semantics,
/// conversion from literal f64 constants, and printability for errors.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, used for constants such as ln(2*pi).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float type")
    }

    /// Lossy conversion to f64, used for reporting and serialization.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
