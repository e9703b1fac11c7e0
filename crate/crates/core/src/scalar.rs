use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, NumCast};

/// Floating point scalar used by the electrical and estimation math: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumCast + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from a parsed or wire value.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable in every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
