//! Extended reals for convex analysis.
//!
//! Function values of a proper convex function live in `(-inf, +inf]`;
//! one-sided directional derivatives can reach either end of the line
//! (an indicator's left derivative at a boundary point is `-inf`). Infinity
//! is always a tag, never a large float.

use core::cmp::Ordering;
use core::fmt;
use core::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtendedReal {
    NegInf,
    Finite(f64),
    PosInf,
}

pub use ExtendedReal::{Finite, NegInf, PosInf};

impl ExtendedReal {
    pub const ZERO: Self = Finite(0.0);

    /// Maps an IEEE value onto the extended line; `NaN` is rejected.
    pub fn from_f64(x: f64) -> Self {
        assert!(!x.is_nan(), "NaN is not an extended real");
        if x == f64::INFINITY {
            PosInf
        } else if x == f64::NEG_INFINITY {
            NegInf
        } else {
            Finite(x)
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Finite(x) => Some(x),
            _ => None,
        }
    }

    /// Lossy view as an IEEE double (`inf` for the infinite tags).
    pub fn to_f64(self) -> f64 {
        match self {
            NegInf => f64::NEG_INFINITY,
            Finite(x) => x,
            PosInf => f64::INFINITY,
        }
    }

    /// Sum under the convention `r + inf = inf`; `None` for `inf - inf`.
    pub fn checked_add(self, rhs: Self) -> Option<Self> {
        match (self, rhs) {
            (PosInf, NegInf) | (NegInf, PosInf) => None,
            (PosInf, _) | (_, PosInf) => Some(PosInf),
            (NegInf, _) | (_, NegInf) => Some(NegInf),
            (Finite(a), Finite(b)) => Some(Finite(a + b)),
        }
    }

    /// Scaling by a nonnegative factor with `0 * inf = 0`.
    pub fn scale(self, t: f64) -> Self {
        assert!(t >= 0.0, "extended reals are only scaled by nonnegative factors");
        if t == 0.0 {
            return Finite(0.0);
        }
        match self {
            Finite(x) => Finite(t * x),
            other => other,
        }
    }

    /// `self <= rhs + tol`, with infinite operands compared exactly.
    pub fn le_tol(self, rhs: Self, tol: f64) -> bool {
        match (self, rhs) {
            (Finite(a), Finite(b)) => a <= b + tol,
            (a, b) => a <= b,
        }
    }

    /// Equality of infinite tags, or finite values within `tol`.
    pub fn approx_eq(self, rhs: Self, tol: f64) -> bool {
        match (self, rhs) {
            (Finite(a), Finite(b)) => (a - b).abs() <= tol,
            (a, b) => a == b,
        }
    }

    pub fn min(self, rhs: Self) -> Self {
        if rhs < self {
            rhs
        } else {
            self
        }
    }

    pub fn max(self, rhs: Self) -> Self {
        if rhs > self {
            rhs
        } else {
            self
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Finite(a), Finite(b)) => a.partial_cmp(b),
            (a, b) => Some(rank(*a).cmp(&rank(*b))),
        }
    }
}

fn rank(x: ExtendedReal) -> u8 {
    match x {
        NegInf => 0,
        Finite(_) => 1,
        PosInf => 2,
    }
}

impl From<f64> for ExtendedReal {
    fn from(x: f64) -> Self {
        Self::from_f64(x)
    }
}

impl Add for ExtendedReal {
    type Output = Self;

    /// Panics on the indeterminate form `inf - inf`.
    fn add(self, rhs: Self) -> Self {
        self.checked_add(rhs)
            .expect("indeterminate extended-real sum inf - inf")
    }
}

impl Add<f64> for ExtendedReal {
    type Output = Self;

    fn add(self, rhs: f64) -> Self {
        self + Finite(rhs)
    }
}

impl Sub for ExtendedReal {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Neg for ExtendedReal {
    type Output = Self;

    fn neg(self) -> Self {
        match self {
            NegInf => PosInf,
            Finite(x) => Finite(-x),
            PosInf => NegInf,
        }
    }
}

impl Mul<ExtendedReal> for f64 {
    type Output = ExtendedReal;

    /// `t * inf = inf` for `t > 0`; negative factors flip the sign.
    fn mul(self, rhs: ExtendedReal) -> ExtendedReal {
        if self >= 0.0 {
            rhs.scale(self)
        } else {
            -(rhs.scale(-self))
        }
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegInf => f.write_str("-inf"),
            Finite(x) => fmt::Display::fmt(x, f),
            PosInf => f.write_str("inf"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinity_absorbs_finite_values() {
        assert_eq!(Finite(3.0) + PosInf, PosInf);
        assert_eq!(2.0 * PosInf, PosInf);
        assert_eq!(-2.0 * PosInf, NegInf);
        assert_eq!(0.0 * PosInf, Finite(0.0));
        assert_eq!(PosInf.checked_add(NegInf), None);
    }

    #[test]
    fn ordering_is_total_on_tags() {
        assert!(NegInf < Finite(-1e300));
        assert!(Finite(1e300) < PosInf);
        assert!(Finite(1.0) < Finite(2.0));
        assert!(PosInf.le_tol(PosInf, 0.0));
        assert!(!PosInf.le_tol(Finite(1e308), 1e308));
        assert_eq!(Finite(1.0).min(NegInf), NegInf);
        assert_eq!(Finite(1.0).max(PosInf), PosInf);
    }

    #[test]
    fn from_ieee_infinities() {
        assert_eq!(ExtendedReal::from(f64::INFINITY), PosInf);
        assert_eq!(ExtendedReal::from(f64::NEG_INFINITY), NegInf);
        assert_eq!(PosInf.to_f64(), f64::INFINITY);
    }
}
