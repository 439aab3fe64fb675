//! Floating-point abstraction for the numeric core.
//!
//! Every geometric and numeric module is generic over [`Scalar`] so the same
//! code runs in `f32` or `f64`. The crate root re-exports `f64` aliases for
//! the common types; `f64` is the precision used by the trainer and the CLI.
//!
//! Randomness is deliberately *not* part of this trait: all random draws are
//! made in `f64` and lifted with [`Scalar::lit`], so a seeded run consumes the
//! same generator stream regardless of the scalar type in use.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Scalar type for box geometry, feature tensors, model parameters, and
/// losses. Implemented for `f32` and `f64`.
///
/// The bound set is exactly what the numeric modules use: IEEE float
/// semantics ([`Float`]), literal lifting ([`FromPrimitive`]), in-place
/// accumulation, and iterator summation.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lifts an `f64` literal or configuration value into this scalar type.
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 value representable in scalar type")
    }

    /// Converts to `f64` for logging and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Lifts a count (loss normalizers, averages) into the scalar domain.
    fn from_count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
