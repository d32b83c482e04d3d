//! Binary16 storage scalar and the two MMA accumulation disciplines.
//!
//! `Half` is IEEE 754 binary16 with round-to-nearest-even narrowing and full
//! subnormal support (no flush-to-zero). The bit-level conversion is delegated
//! to the `half` crate; everything above it (accumulation contract, element
//! plumbing for fragments) lives here.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub use half::f16 as Half;

/// Narrow a binary32 value to binary16, round-to-nearest-even.
///
/// Overflow saturates to ±inf, NaN stays NaN.
#[inline]
pub fn f32_to_f16(x: f32) -> Half {
    Half::from_f32(x)
}

/// Exact widening of a binary16 value.
#[inline]
pub fn f16_to_f32(h: Half) -> f32 {
    h.to_f32()
}

/// Element type of the MMA accumulator (matrix C).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccMode {
    Fp16,
    Fp32,
}

impl AccMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AccMode::Fp16 => "fp16",
            AccMode::Fp32 => "fp32",
        }
    }
}

impl fmt::Display for AccMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" | "fp16-acc" | "f16" => Ok(AccMode::Fp16),
            "fp32" | "fp32-acc" | "f32" => Ok(AccMode::Fp32),
            other => Err(format!("unknown accumulation mode `{other}` (expected fp16 or fp32)")),
        }
    }
}

/// An accumulator value tagged with its storage type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Acc {
    F16(Half),
    F32(f32),
}

impl Acc {
    pub fn zero(mode: AccMode) -> Self {
        match mode {
            AccMode::Fp16 => Acc::F16(Half::ZERO),
            AccMode::Fp32 => Acc::F32(0.0),
        }
    }

    pub fn to_f32(self) -> f32 {
        match self {
            Acc::F16(h) => h.to_f32(),
            Acc::F32(x) => x,
        }
    }

    pub fn mode(self) -> AccMode {
        match self {
            Acc::F16(_) => AccMode::Fp16,
            Acc::F32(_) => AccMode::Fp32,
        }
    }
}

/// Sum of the four binary16 products, evaluated left to right in binary32.
///
/// Products of two binary16 values are exact in binary32 (11-bit significands).
#[inline]
fn partial4(a: &[Half; 4], b: &[Half; 4]) -> f32 {
    let mut sum = a[0].to_f32() * b[0].to_f32();
    sum += a[1].to_f32() * b[1].to_f32();
    sum += a[2].to_f32() * b[2].to_f32();
    sum += a[3].to_f32() * b[3].to_f32();
    sum
}

/// One k=4 step into a binary32 accumulator.
#[inline]
pub fn dot4_f32(a: &[Half; 4], b: &[Half; 4], acc: f32) -> f32 {
    acc + partial4(a, b)
}

/// One k=4 step into a binary16 accumulator: the partial sum is formed in
/// binary32 and rounded to binary16 once, when it is added to `acc`.
#[inline]
pub fn dot4_f16(a: &[Half; 4], b: &[Half; 4], acc: Half) -> Half {
    f32_to_f16(acc.to_f32() + partial4(a, b))
}

/// Mode-dispatched k=4 step. The accumulator's storage type must match `mode`.
pub fn dot4_acc(a: &[Half; 4], b: &[Half; 4], acc: Acc, mode: AccMode) -> crate::Result<Acc> {
    match (acc, mode) {
        (Acc::F32(c), AccMode::Fp32) => Ok(Acc::F32(dot4_f32(a, b, c))),
        (Acc::F16(c), AccMode::Fp16) => Ok(Acc::F16(dot4_f16(a, b, c))),
        (acc, mode) => Err(crate::Error::ModeMismatch {
            expected: mode,
            found: acc.mode(),
        }),
    }
}

/// Register element stored in a warp fragment.
pub trait Element: Copy + Default + Send + Sync + PartialEq + fmt::Debug + 'static {
    const IS_F32: bool;
    fn widen(self) -> f32;
    fn narrow(x: f32) -> Self;
}

impl Element for Half {
    const IS_F32: bool = false;
    #[inline]
    fn widen(self) -> f32 {
        self.to_f32()
    }
    #[inline]
    fn narrow(x: f32) -> Self {
        f32_to_f16(x)
    }
}

impl Element for f32 {
    const IS_F32: bool = true;
    #[inline]
    fn widen(self) -> f32 {
        self
    }
    #[inline]
    fn narrow(x: f32) -> Self {
        x
    }
}

/// Distance between `x` and the next binary16 value away from zero.
pub fn f16_ulp(x: f32) -> f32 {
    let h = f32_to_f16(x.abs());
    if h.is_infinite() {
        return f32::INFINITY;
    }
    let next = Half::from_bits(h.to_bits() + 1);
    next.to_f32() - h.to_f32()
}
