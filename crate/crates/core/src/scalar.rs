//! Scalar abstraction for interval arithmetic.
//!
//! Span geometry and the overlap metrics only need ordered field arithmetic,
//! so they are written against [`Scalar`] and work for `f32`, `f64` and exact
//! rationals alike. Exact rationals are what the hierarchy fractions are
//! expressed in, which lets the segmenter tests check coverage with `==`.

use num_rational::Ratio;
use num_traits::{Num, ToPrimitive};
use std::fmt::Debug;

/// Ordered numeric type usable for time coordinates.
pub trait Scalar: Num + PartialOrd + Copy + Debug + ToPrimitive {
    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Converts to `f64` for reporting; exact types round.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Nearest representable value of an exact fraction.
    fn from_rational(r: Rational) -> Self;
}

impl Scalar for f32 {
    fn from_rational(r: Rational) -> Self {
        (*r.numer() as f64 / *r.denom() as f64) as f32
    }
}

impl Scalar for f64 {
    fn from_rational(r: Rational) -> Self {
        *r.numer() as f64 / *r.denom() as f64
    }
}

impl Scalar for Ratio<i64> {
    fn from_rational(r: Rational) -> Self {
        r
    }
}

impl Scalar for Ratio<i128> {
    fn from_rational(r: Rational) -> Self {
        Ratio::new(*r.numer() as i128, *r.denom() as i128)
    }
}

/// Exact rational used for hierarchy fractions and exact span tests.
pub type Rational = Ratio<i64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_agree_across_types() {
        assert_eq!(2.0f64.min_of(3.0), 2.0);
        assert_eq!(2.0f32.max_of(3.0), 3.0);
        let a = Rational::new(1, 16);
        let b = Rational::new(1, 8);
        assert_eq!(a.max_of(b), b);
        assert_eq!(b.min_of(a), a);
        assert_eq!(Rational::new(1, 16).as_f64(), 0.0625);
    }
}
