//! Numeric abstraction shared by the scoring code.
//!
//! Block densities, retrieval scores and evaluation metrics are all computed
//! through [`Scalar`], so callers can pick `f32`, `f64`, or an exact
//! [`Ratio<i64>`] when ties must compare exactly.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Num, ToPrimitive};

/// A number that block densities and metric ratios can be computed in.
pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// Lossless (or nearest) conversion from an unsigned count.
    fn from_count(n: u64) -> Self;

    /// `num / den` in this scalar. `den` must be non-zero.
    fn ratio(num: u64, den: u64) -> Self {
        Self::from_count(num) / Self::from_count(den)
    }

    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_count(n: u64) -> Self {
        n as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_count(n: u64) -> Self {
        n as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for Ratio<i64> {
    fn from_count(n: u64) -> Self {
        Ratio::from_integer(i64::try_from(n).expect("count exceeds i64"))
    }
    fn ratio(num: u64, den: u64) -> Self {
        Ratio::new(
            i64::try_from(num).expect("count exceeds i64"),
            i64::try_from(den).expect("count exceeds i64"),
        )
    }
    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Total order helper for scores that may be floats. NaN sorts lowest.
pub(crate) fn cmp_scalar<S: Scalar>(a: &S, b: &S) -> std::cmp::Ordering {
    a.partial_cmp(b).unwrap_or_else(|| {
        let a_nan = a.to_f64().is_nan();
        let b_nan = b.to_f64().is_nan();
        b_nan.cmp(&a_nan)
    })
}
