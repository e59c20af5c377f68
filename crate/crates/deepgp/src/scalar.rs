//! Scalar abstraction. The numeric core is generic over the floating-point
//! type; concrete `f64` aliases of the main types live at the crate root.

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive};
use std::iter::Sum;

/// Floating-point scalar the library is generic over: `f32` or `f64`.
pub trait Real: NdFloat + FloatConst + FromPrimitive + Sum<Self> + Default {
    /// Cast from an `f64` literal or intermediate.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("literal must be representable")
    }

    /// Widen to `f64` (used at serialization boundaries; wire formats are f64).
    fn to_f64c(self) -> f64;
}

impl Real for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}
