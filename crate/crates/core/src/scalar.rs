//! Floating-point element abstraction.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type for tensors and solvers: `f32` or `f64`.
///
/// The bound set is what the numeric kernels actually use; anything float-like
/// that satisfies it will do, but the crate only ships impls for the two
/// machine floats.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype code this element carries in the LTSR tensor file format.
    const LTSR_DTYPE: u8;

    /// Converts an `f64` constant, panicking only on the impossible case of a
    /// finite constant not being representable.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("constant representable as scalar")
    }

    /// Widens to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f64 {
    const LTSR_DTYPE: u8 = 1;
}

impl Scalar for f32 {
    const LTSR_DTYPE: u8 = 2;
}
