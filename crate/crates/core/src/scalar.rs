//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical kernels are written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot represent at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Pairwise summation with a fixed split order, so results are reproducible bit-for-bit
/// regardless of how callers chunk work.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut acc = T::zero();
        for &x in xs {
            acc = acc + x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of `f(i)` over `0..n`, same split order as [`pairwise_sum`].
pub fn pairwise_sum_by<T: Scalar, F: Fn(usize) -> T>(n: usize, f: &F) -> T {
    fn go<T: Scalar, F: Fn(usize) -> T>(lo: usize, hi: usize, f: &F) -> T {
        const BLOCK: usize = 32;
        if hi - lo <= BLOCK {
            let mut acc = T::zero();
            for i in lo..hi {
                acc = acc + f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 45.0);
        assert_eq!(pairwise_sum_by(10, &|i| xs[i]), 45.0);
    }

    #[test]
    fn pairwise_reduces_rounding_on_long_inputs() {
        let xs = vec![0.1f32; 1_000_000];
        let s = pairwise_sum(&xs);
        assert!((s - 100_000.0).abs() < 1.0, "{s}");
        let both = pairwise_sum_by(xs.len(), &|i| xs[i]);
        assert_eq!(s, both);
    }

    #[test]
    fn literals_round_trip() {
        assert_eq!(<f64 as Scalar>::lit(0.25), 0.25);
        assert_eq!(<f32 as Scalar>::lit(0.5).as_f64(), 0.5);
    }
}
