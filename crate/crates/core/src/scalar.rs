//! Scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
///
/// The thresholds are expressed in the working precision. All tolerances
/// quoted in the crate docs assume `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Columns with a Euclidean norm below this are treated as zero neurons.
    const ZERO_NORM: Self;
    /// Two unit neurons closer than this make the energy diverge.
    const DEGENERATE_PAIR: Self;

    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const ZERO_NORM: f64 = 1e-12;
    const DEGENERATE_PAIR: f64 = 1e-9;
}

impl Scalar for f32 {
    const ZERO_NORM: f32 = 1e-6;
    const DEGENERATE_PAIR: f32 = 1e-4;
}
