//! Scalar abstraction for all feature-space and network math.
//!
//! Everything learned (agent weights, memory features, losses, the tape)
//! is generic over [`Scalar`], instantiated as `f32` or `f64`. World
//! geometry and metric outputs stay `f64`: they are measurements in
//! meters and the on-disk schemas pin IEEE-754 doubles.

use num_traits as nt;
use std::fmt::{Debug, Display};

pub trait Scalar:
    nt::Float
    + nt::FloatConst
    + nt::FromPrimitive
    + nt::ToPrimitive
    + nt::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` sample or measurement.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widen to `f64` for serialization and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar widens to f64")
    }
}

impl<T> Scalar for T where
    T: nt::Float
        + nt::FloatConst
        + nt::FromPrimitive
        + nt::ToPrimitive
        + nt::NumAssign
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}
