//! Floating-point abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used by the estimation core (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Relative slack used when comparing accumulated sums for ties.
    fn tie_eps() -> Self {
        Self::epsilon() * Self::of(1024.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of_usize(v.len())
}

/// Sample variance with the `n - 1` denominator.
pub(crate) fn sample_variance<T: Scalar>(v: &[T]) -> T {
    let m = mean(v);
    let ss: T = v.iter().map(|&x| (x - m) * (x - m)).sum();
    ss / T::of_usize(v.len() - 1)
}

pub(crate) fn expit<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}
