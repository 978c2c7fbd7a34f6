use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar the numeric core is written against (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal or configuration value into `Self`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    /// Widens to `f64` for serialization and reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar always widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
