use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar used by the probability and loss kernels: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an f64 literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Absolute tolerance on `Σ p = 1` for a vector of `len` entries.
///
/// 1e-12 for f64 at any practical length; widens with machine epsilon so
/// that f32 vectors stay constructible.
pub fn sum_tolerance<S: Scalar>(len: usize) -> S {
    let scaled = S::epsilon() * S::lit(4.0 * len.max(1) as f64);
    scaled.max(S::lit(1e-12))
}
