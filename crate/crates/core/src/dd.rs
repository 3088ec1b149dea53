//! Software double-double arithmetic (~106-bit significand).
//!
//! A value is an unevaluated sum `hi + lo` of two binary64 numbers with
//! `|lo| <= ulp(hi)/2`. Sums and products use the classic error-free
//! transforms (two-sum, two-product via fused multiply-add); division and
//! square root refine a binary64 seed. Transcendentals reduce the argument
//! and sum a truncated series, which is enough for the ~1e-31 targets of
//! the extended-precision experiments.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::scalar::{Precision, Scalar};

#[derive(Clone, Copy, Debug, Default)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    // requires |a| >= |b| or a == 0
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = f64::mul_add(a, b, -p);
    (p, err)
}

const LN2: DoubleDouble = DoubleDouble {
    hi: 0.693_147_180_559_945_3,
    lo: 2.319_046_813_846_299_6e-17,
};

impl DoubleDouble {
    pub const ZERO: Self = DoubleDouble { hi: 0.0, lo: 0.0 };
    pub const ONE: Self = DoubleDouble { hi: 1.0, lo: 0.0 };

    #[inline]
    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        DoubleDouble { hi, lo }
    }

    #[inline]
    pub fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi == 0.0 && self.lo == 0.0 {
            return Self::ZERO;
        }
        if self.hi < 0.0 {
            return Self::from_f64(f64::NAN);
        }
        // Karp's trick: one Newton step on a binary64 seed.
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let err = (self - Self::from_f64(ax) * Self::from_f64(ax)).hi * (x * 0.5);
        let (hi, lo) = quick_two_sum(ax, err);
        DoubleDouble { hi, lo }
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::from_f64(f64::INFINITY);
        }
        if self.hi < -709.0 {
            return Self::ZERO;
        }
        // e^x = 2^k * e^r with r = x - k ln 2, |r| <= ln(2)/2.
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * Self::from_f64(k);
        let mut sum = Self::ONE + r;
        let mut term = r;
        for n in 2..32 {
            term = term * r / Self::from_f64(n as f64);
            sum += term;
            if term.hi.abs() <= 1e-35 * sum.hi.abs() {
                break;
            }
        }
        let scale = 2.0f64.powi(k as i32);
        DoubleDouble {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    pub fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from_f64(f64::NAN);
        }
        // Newton on exp(y) = x, seeded at binary64 accuracy.
        let mut y = Self::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Self::ONE;
        }
        y
    }

    pub fn tanh(self) -> Self {
        if self.hi < 0.0 {
            return -(-self).tanh();
        }
        if self.hi > 60.0 {
            return Self::ONE;
        }
        let t = (-(self + self)).exp();
        (Self::ONE - t) / (Self::ONE + t)
    }

    pub fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()) * Self::from_f64(0.5)
    }

    pub fn atanh(self) -> Self {
        ((Self::ONE + self) / (Self::ONE - self)).ln() * Self::from_f64(0.5)
    }

    pub fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::ONE;
        }
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }

    pub fn powf(self, e: Self) -> Self {
        if self.hi == 0.0 && self.lo == 0.0 {
            return if e.hi > 0.0 {
                Self::ZERO
            } else {
                Self::from_f64(f64::NAN)
            };
        }
        (self.ln() * e).exp()
    }

    pub fn recip(self) -> Self {
        Self::ONE / self
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let (s1, s2) = two_sum(self.hi, rhs.hi);
        let (t1, t2) = two_sum(self.lo, rhs.lo);
        let s2 = s2 + t1;
        let (s1, s2) = quick_two_sum(s1, s2);
        let s2 = s2 + t2;
        let (hi, lo) = quick_two_sum(s1, s2);
        DoubleDouble { hi, lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let (p1, p2) = two_prod(self.hi, rhs.hi);
        let p2 = p2 + self.hi * rhs.lo + self.lo * rhs.hi;
        let (hi, lo) = quick_two_sum(p1, p2);
        DoubleDouble { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q1 = self.hi / rhs.hi;
        if !q1.is_finite() {
            return DoubleDouble::from_f64(q1);
        }
        let r = self - rhs * DoubleDouble::from_f64(q1);
        let q2 = r.hi / rhs.hi;
        let r = r - rhs * DoubleDouble::from_f64(q2);
        let q3 = r.hi / rhs.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DoubleDouble { hi, lo } + DoubleDouble::from_f64(q3)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl AddAssign for DoubleDouble {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl SubAssign for DoubleDouble {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl MulAssign for DoubleDouble {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}
impl DivAssign for DoubleDouble {
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}

impl Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, |a, b| a + b)
    }
}

impl PartialEq for DoubleDouble {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            ord => ord,
        }
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Lossy by design: reporting happens at binary64.
        write!(f, "{}", self.to_f64())
    }
}

impl Scalar for DoubleDouble {
    const PRECISION: Precision = Precision::Extended;

    fn zero() -> Self {
        Self::ZERO
    }
    fn one() -> Self {
        Self::ONE
    }
    fn from_f64(x: f64) -> Self {
        Self::from_f64(x)
    }
    fn to_f64(self) -> f64 {
        self.to_f64()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn cosh(self) -> Self {
        self.cosh()
    }
    fn atanh(self) -> Self {
        self.atanh()
    }
    fn powi(self, n: i32) -> Self {
        self.powi(n)
    }
    fn powf(self, e: Self) -> Self {
        self.powf(e)
    }
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn epsilon() -> Self {
        // 2^-104
        Self::from_f64(4.930_380_657_631_324e-32)
    }
    fn recip(self) -> Self {
        self.recip()
    }
}
