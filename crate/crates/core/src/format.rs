//! Emulated storage precisions.
//!
//! Values always live in `f64`. A [`NumericFormat`] describes the precision the
//! value is *meant* to have; arithmetic under an emulated format re-rounds every
//! primitive result with round-to-nearest, ties-to-even. Because `f64` carries
//! more than twice the significand bits of every emulated format, computing
//! `+ - * /` in `f64` and rounding once is identical to native arithmetic in
//! the narrower format.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericFormat {
    F64,
    F32,
    /// bfloat16: 8 exponent bits, 7 stored mantissa bits.
    Bf16e,
    /// IEEE binary16: 5 exponent bits, 10 stored mantissa bits.
    F16e,
}

impl NumericFormat {
    pub const ALL: [NumericFormat; 4] = [Self::F64, Self::F32, Self::Bf16e, Self::F16e];

    pub fn mantissa_bits(self) -> u32 {
        match self {
            Self::F64 => 52,
            Self::F32 => 23,
            Self::Bf16e => 7,
            Self::F16e => 10,
        }
    }

    pub fn exponent_bits(self) -> u32 {
        match self {
            Self::F64 => 11,
            Self::F32 => 8,
            Self::Bf16e => 8,
            Self::F16e => 5,
        }
    }

    /// Storage size of one element.
    pub fn bytes(self) -> u64 {
        match self {
            Self::F64 => 8,
            Self::F32 => 4,
            Self::Bf16e | Self::F16e => 2,
        }
    }

    pub fn is_emulated(self) -> bool {
        matches!(self, Self::Bf16e | Self::F16e)
    }

    fn max_exponent(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    fn min_exponent(self) -> i32 {
        1 - self.max_exponent()
    }

    /// Largest finite magnitude.
    pub fn max_finite(self) -> f64 {
        match self {
            Self::F64 => f64::MAX,
            Self::F32 => f32::MAX as f64,
            _ => {
                let p = self.mantissa_bits() as i32;
                (2.0 - pow2(-p)) * pow2(self.max_exponent())
            }
        }
    }

    /// The wider of `self` and F32; gradient accumulators and row statistics
    /// are kept in this format.
    pub fn at_least_f32(self) -> NumericFormat {
        match self {
            Self::F64 => Self::F64,
            _ => Self::F32,
        }
    }

    /// Round to the nearest representable value (ties to even). Overflow
    /// yields a signed infinity; NaN passes through.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Self::F64 => x,
            Self::F32 => x as f32 as f64,
            _ => round_to_precision(x, self.mantissa_bits(), self.min_exponent(), self.max_finite()),
        }
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
            Self::Bf16e => "bf16e",
            Self::F16e => "f16e",
        })
    }
}

impl FromStr for NumericFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            "bf16e" | "bf16" => Ok(Self::Bf16e),
            "f16e" | "f16" => Ok(Self::F16e),
            other => Err(Error::validation(format!("unknown numeric format `{other}`"))),
        }
    }
}

/// Result of [`round_to_format`]: the rounded value and whether it overflowed
/// to the infinity sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rounded {
    pub value: f64,
    pub overflowed: bool,
}

pub fn round_to_format(x: f64, fmt: NumericFormat) -> Result<Rounded> {
    if !x.is_finite() {
        return Err(Error::NumericInput(format!("cannot round non-finite value {x}")));
    }
    let value = fmt.round(x);
    Ok(Rounded {
        value,
        overflowed: value.is_infinite(),
    })
}

/// Exact power of two for exponents inside the normal f64 range.
#[inline]
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Round `x` to `mant` stored mantissa bits with minimum normal exponent
/// `emin` (gradual underflow below it) and saturate past `max_finite`.
fn round_to_precision(x: f64, mant: u32, emin: i32, max_finite: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    // f64 subnormals report -1023 here and are clamped to emin anyway.
    let exp = ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let quantum = pow2(exp.max(emin) - mant as i32);
    let r = (x / quantum).round_ties_even() * quantum;
    if r.abs() > max_finite {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

/// Compute type used inside the kernels. Native formats compute directly in
/// `f32`/`f64`; emulated formats compute in `f64` and re-round after every op.
pub(crate) trait Arith: Copy + Send + Sync {
    type T: Float + Send + Sync + std::fmt::Debug;

    fn load(&self, x: f64) -> Self::T;
    fn store(&self, x: Self::T) -> f64;
    /// Re-round a primitive result into the format.
    fn fix(&self, x: Self::T) -> Self::T;
}

#[derive(Clone, Copy)]
pub(crate) struct NativeF64;

#[derive(Clone, Copy)]
pub(crate) struct NativeF32;

#[derive(Clone, Copy)]
pub(crate) struct Emulated(pub NumericFormat);

impl Arith for NativeF64 {
    type T = f64;
    #[inline(always)]
    fn load(&self, x: f64) -> f64 {
        x
    }
    #[inline(always)]
    fn store(&self, x: f64) -> f64 {
        x
    }
    #[inline(always)]
    fn fix(&self, x: f64) -> f64 {
        x
    }
}

impl Arith for NativeF32 {
    type T = f32;
    #[inline(always)]
    fn load(&self, x: f64) -> f32 {
        x as f32
    }
    #[inline(always)]
    fn store(&self, x: f32) -> f64 {
        x as f64
    }
    #[inline(always)]
    fn fix(&self, x: f32) -> f32 {
        x
    }
}

impl Arith for Emulated {
    type T = f64;
    #[inline(always)]
    fn load(&self, x: f64) -> f64 {
        self.0.round(x)
    }
    #[inline(always)]
    fn store(&self, x: f64) -> f64 {
        x
    }
    #[inline(always)]
    fn fix(&self, x: f64) -> f64 {
        self.0.round(x)
    }
}

/// Monomorphise `$body` over the compute type matching `$fmt`, binding the
/// arithmetic to `$a`.
macro_rules! with_arith {
    ($fmt:expr, |$a:ident| $body:expr) => {
        match $fmt {
            $crate::format::NumericFormat::F64 => {
                let $a = $crate::format::NativeF64;
                $body
            }
            $crate::format::NumericFormat::F32 => {
                let $a = $crate::format::NativeF32;
                $body
            }
            other => {
                let $a = $crate::format::Emulated(other);
                $body
            }
        }
    };
}
pub(crate) use with_arith;
