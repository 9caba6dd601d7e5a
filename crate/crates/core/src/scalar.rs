//! Scalar abstractions shared by the aggregation and training code.
//!
//! Aggregation only needs field arithmetic, so it is generic over [`Scalar`]
//! and also runs on exact rationals. Training needs transcendental functions
//! and is generic over [`Real`] (`f32` / `f64`).

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num};

/// Field-like scalar: add, sub, mul, div, ordering and conversion from counts.
pub trait Scalar: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {
    /// Converts a count into the scalar type. Counts used here are small, so
    /// the conversion never fails for the supported types.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl<T> Scalar for T where T: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {}

/// Floating point scalar used by the toy model.
pub trait Real: Scalar + Float {
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
