//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into `S`.
#[inline]
pub fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 literal representable in scalar type")
}

/// Lossy conversion to `f64`, used at IO boundaries.
#[inline]
pub fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// A point in the two-dimensional data space.
pub type Point<S> = [S; 2];

#[inline]
pub(crate) fn add<S: Scalar>(a: Point<S>, b: Point<S>) -> Point<S> {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub(crate) fn sub<S: Scalar>(a: Point<S>, b: Point<S>) -> Point<S> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub(crate) fn axpby<S: Scalar>(a: S, x: Point<S>, b: S, y: Point<S>) -> Point<S> {
    [a * x[0] + b * y[0], a * x[1] + b * y[1]]
}

#[inline]
pub fn norm<S: Scalar>(a: Point<S>) -> S {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist<S: Scalar>(a: Point<S>, b: Point<S>) -> S {
    norm(sub(a, b))
}
