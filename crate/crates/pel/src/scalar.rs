//! Scalar abstraction: the numerical core is generic over the floating-point
//! type through [`Real`], with `f64` as the default used by the CLI and the
//! simulation lab.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the library.
///
/// Implemented by `f32` and `f64` out of the box.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable in this scalar type")
    }

    /// Sample-size counts and indices as scalars.
    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize not representable in this scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
}
