//! Scalar-precision contract.
//!
//! Every run executes end-to-end in exactly one arithmetic: IEEE binary32,
//! IEEE binary64, or a software double-double with a ~106-bit significand.
//! Core math is generic over [`Scalar`]; `f32`/`f64` satisfy it through
//! `num_traits::Float`, the extended type through its own implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

pub use crate::dd::DoubleDouble;

/// Precision tag selecting the arithmetic of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Binary32,
    Binary64,
    Extended,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Binary32 => "binary32",
            Precision::Binary64 => "binary64",
            Precision::Extended => "extended",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary32" | "f32" => Ok(Precision::Binary32),
            "binary64" | "f64" => Ok(Precision::Binary64),
            "extended" | "dd" => Ok(Precision::Extended),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Arithmetic required by the numeric core. No silent widening: all
/// intermediate values stay in `Self`.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
{
    const PRECISION: Precision;

    fn zero() -> Self;
    fn one() -> Self;
    /// Rounds a binary64 value into this precision (exact for binary64 and
    /// extended).
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn cosh(self) -> Self;
    fn atanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Unit roundoff scale of this precision.
    fn epsilon() -> Self;
    fn recip(self) -> Self {
        Self::one() / self
    }
}

macro_rules! impl_scalar_for_float {
    ($t:ty, $tag:expr) => {
        impl Scalar for $t {
            const PRECISION: Precision = $tag;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                num_traits::Float::abs(self)
            }
            fn sqrt(self) -> Self {
                num_traits::Float::sqrt(self)
            }
            fn exp(self) -> Self {
                num_traits::Float::exp(self)
            }
            fn ln(self) -> Self {
                num_traits::Float::ln(self)
            }
            fn tanh(self) -> Self {
                num_traits::Float::tanh(self)
            }
            fn cosh(self) -> Self {
                num_traits::Float::cosh(self)
            }
            fn atanh(self) -> Self {
                num_traits::Float::atanh(self)
            }
            fn powi(self, n: i32) -> Self {
                num_traits::Float::powi(self, n)
            }
            fn powf(self, e: Self) -> Self {
                num_traits::Float::powf(self, e)
            }
            fn max(self, other: Self) -> Self {
                num_traits::Float::max(self, other)
            }
            fn min(self, other: Self) -> Self {
                num_traits::Float::min(self, other)
            }
            fn is_finite(self) -> bool {
                num_traits::Float::is_finite(self)
            }
            fn epsilon() -> Self {
                <$t as num_traits::Float>::epsilon()
            }
        }
    };
}

impl_scalar_for_float!(f32, Precision::Binary32);
impl_scalar_for_float!(f64, Precision::Binary64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_parses_and_prints() {
        for (s, p) in [
            ("binary32", Precision::Binary32),
            ("binary64", Precision::Binary64),
            ("extended", Precision::Extended),
        ] {
            assert_eq!(s.parse::<Precision>().unwrap(), p);
            assert_eq!(p.name(), s);
        }
        assert!("binary16".parse::<Precision>().is_err());
    }

    #[test]
    fn f64_round_trips_embedded_dataset_literals() {
        // Decimal literals of the embedded 2x2 dataset must survive a
        // parse -> format -> parse round trip unchanged at binary64.
        for lit in [
            "1.54099607",
            "-0.2934289",
            "-2.17878938",
            "0.56843126",
            "-1.08452237",
            "-1.39859545",
        ] {
            let v: f64 = lit.parse().unwrap();
            let back: f64 = format!("{v}").parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits());
        }
    }
}
