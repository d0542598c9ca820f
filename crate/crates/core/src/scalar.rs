//! Scalar abstraction shared by every numeric kernel in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type: `f32` or `f64`.
///
/// Experiments default to `f64`; every pipeline also runs in `f32`, which is
/// the precision used on disk.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    fn of(x: f64) -> Self;

    /// Lossy conversion to `f64`.
    fn as_f64(self) -> f64;

    /// Rounds to the nearest `f32`, the precision used on disk.
    fn snap_f32(self) -> Self {
        Self::of(self.as_f64() as f32 as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Tolerance for checking that `n` weights of type `T` sum to one: `floor`,
/// widened to a few ulps per term when `T` is coarser than that.
pub fn sum_tolerance<T: Scalar>(floor: f64, n: usize) -> f64 {
    floor.max(4.0 * n.max(1) as f64 * T::epsilon().as_f64())
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Euclidean norm.
#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Numerically stable softmax over `logits`; entries equal to `-inf` map to exactly zero.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let mut out: Vec<T> = logits
        .iter()
        .map(|&v| {
            if v == T::neg_infinity() {
                T::zero()
            } else {
                (v - max).exp()
            }
        })
        .collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}
