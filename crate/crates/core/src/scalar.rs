//! Scalar abstraction for the numeric core.
//!
//! Everything numeric is generic over [`Scalar`] so the same graph code runs
//! at `f32` (production, see the aliases in the crate root) and at `f64`
//! (finite-difference oracles in the test suites).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type of tensors and graphs.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Copy + Send + Sync + Debug + Display + 'static
{
    fn from_f64(x: f64) -> Self {
        // f32 saturates on overflow, which is fine for the magnitudes used here.
        <Self as num_traits::NumCast>::from(x).unwrap_or_else(|| {
            if x > 0.0 {
                Self::max_value()
            } else {
                Self::min_value()
            }
        })
    }

    fn to_f64(self) -> f64;

    fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }

    fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}
