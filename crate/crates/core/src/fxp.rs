//! Two's-complement fixed-point words with saturating arithmetic.
//!
//! Every datapath word in the engine is an [`FxPValue`]: a raw integer payload
//! plus the [`FxPFormat`] that gives it meaning (`value = raw * 2^-frac_bits`).
//! Hardware widths are 4, 8 and 16 bits. A 32-bit width exists only as a
//! high-precision reference for oracle runs; it has no entry in the cycle table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FxpError {
    #[error("unsupported word width {0} (expected 4, 8, 16 or 32)")]
    UnsupportedWidth(u32),
    #[error("fractional bits {frac} must be below total bits {total}")]
    FracTooLarge { total: u32, frac: u32 },
    #[error("format mismatch: {0} vs {1}")]
    FormatMismatch(FxPFormat, FxPFormat),
    #[error("shift amount {shift} out of range for {format}")]
    ShiftOutOfRange { shift: u32, format: FxPFormat },
    #[error("raw value {raw} does not fit {format}")]
    RawOutOfRange { raw: i64, format: FxPFormat },
    #[error("cannot parse format `{0}` (expected fxp4|fxp8|fxp16 with optional .fN suffix)")]
    Parse(String),
}

/// Signed fixed-point format: `total_bits` wide with `frac_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FxPFormat {
    total_bits: u8,
    frac_bits: u8,
}

impl FxPFormat {
    pub const FXP4: FxPFormat = FxPFormat { total_bits: 4, frac_bits: 2 };
    pub const FXP8: FxPFormat = FxPFormat { total_bits: 8, frac_bits: 6 };
    pub const FXP16: FxPFormat = FxPFormat { total_bits: 16, frac_bits: 14 };

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, FxpError> {
        if !matches!(total_bits, 4 | 8 | 16 | 32) {
            return Err(FxpError::UnsupportedWidth(total_bits));
        }
        if frac_bits >= total_bits {
            return Err(FxpError::FracTooLarge { total: total_bits, frac: frac_bits });
        }
        Ok(FxPFormat { total_bits: total_bits as u8, frac_bits: frac_bits as u8 })
    }

    /// Format with two integer bits (sign included): Q4.2, Q8.6, Q16.14.
    pub fn with_default_frac(total_bits: u32) -> Result<Self, FxpError> {
        Self::new(total_bits, total_bits.saturating_sub(2))
    }

    pub fn total_bits(self) -> u32 {
        self.total_bits as u32
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits as u32
    }

    /// Integer bits excluding the sign bit.
    pub fn int_bits(self) -> u32 {
        self.total_bits() - 1 - self.frac_bits()
    }

    pub fn is_hardware_width(self) -> bool {
        self.total_bits != 32
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    /// Weight of one LSB.
    pub fn ulp(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(self) -> f64 {
        self.max_raw() as f64 * self.ulp()
    }

    pub fn min_value(self) -> f64 {
        self.min_raw() as f64 * self.ulp()
    }

    /// Same word width, different binary point.
    pub fn with_frac(self, frac_bits: u32) -> Result<Self, FxpError> {
        Self::new(self.total_bits(), frac_bits)
    }

    /// Same number of integer bits at a different word width. Used when a
    /// model is re-targeted to another precision.
    pub fn retarget(self, total_bits: u32) -> Result<Self, FxpError> {
        let int_bits = self.int_bits().min(total_bits - 1);
        Self::new(total_bits, total_bits - 1 - int_bits)
    }

    pub fn saturate_raw(self, raw: i64) -> i32 {
        raw.clamp(self.min_raw(), self.max_raw()) as i32
    }

    /// Compact one-byte code used in parameter image headers:
    /// `(width index + 1) << 5 | frac_bits`.
    pub fn code(self) -> u8 {
        let width_index = match self.total_bits {
            4 => 0,
            8 => 1,
            16 => 2,
            _ => 3,
        };
        ((width_index + 1) << 5) | self.frac_bits
    }

    pub fn from_code(code: u8) -> Option<Self> {
        let total = match code >> 5 {
            1 => 4,
            2 => 8,
            3 => 16,
            4 => 32,
            _ => return None,
        };
        Self::new(total, (code & 0x1f) as u32).ok()
    }
}

impl fmt::Display for FxPFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fxp{}.f{}", self.total_bits, self.frac_bits)
    }
}

impl FromStr for FxPFormat {
    type Err = FxpError;

    /// Accepts `fxp8` (default split) or `fxp8.f6`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || FxpError::Parse(s.to_string());
        let body = s.trim().strip_prefix("fxp").ok_or_else(err)?;
        let (width, frac) = match body.split_once('.') {
            Some((w, f)) => (w, Some(f.strip_prefix('f').ok_or_else(err)?)),
            None => (body, None),
        };
        let total: u32 = width.parse().map_err(|_| err())?;
        match frac {
            Some(f) => {
                let frac: u32 = f.parse().map_err(|_| err())?;
                FxPFormat::new(total, frac)
            }
            None => FxPFormat::with_default_frac(total),
        }
    }
}

impl Serialize for FxPFormat {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FxPFormat {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A fixed-point sample. `raw` always fits `format` in two's complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxPValue {
    raw: i32,
    format: FxPFormat,
}

impl FxPValue {
    pub fn zero(format: FxPFormat) -> Self {
        FxPValue { raw: 0, format }
    }

    pub fn from_raw(raw: i64, format: FxPFormat) -> Result<Self, FxpError> {
        if raw < format.min_raw() || raw > format.max_raw() {
            return Err(FxpError::RawOutOfRange { raw, format });
        }
        Ok(FxPValue { raw: raw as i32, format })
    }

    pub fn from_raw_saturating(raw: i64, format: FxPFormat) -> Self {
        FxPValue { raw: format.saturate_raw(raw), format }
    }

    /// Nearest representable value, ties away from zero, saturating at the
    /// format limits. Non-finite inputs saturate (NaN maps to zero).
    pub fn quantize(x: f64, format: FxPFormat) -> Self {
        if x.is_nan() {
            return Self::zero(format);
        }
        let scaled = (x * (format.frac_bits() as f64).exp2()).round();
        let raw = if scaled >= format.max_raw() as f64 {
            format.max_raw()
        } else if scaled <= format.min_raw() as f64 {
            format.min_raw()
        } else {
            scaled as i64
        };
        FxPValue { raw: raw as i32, format }
    }

    pub fn raw(self) -> i32 {
        self.raw
    }

    pub fn format(self) -> FxPFormat {
        self.format
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.format.ulp()
    }

    pub fn is_zero(self) -> bool {
        self.raw == 0
    }

    fn check_same(self, other: FxPValue) -> Result<(), FxpError> {
        if self.format != other.format {
            return Err(FxpError::FormatMismatch(self.format, other.format));
        }
        Ok(())
    }

    pub fn add_sat(self, other: FxPValue) -> Result<Self, FxpError> {
        self.check_same(other)?;
        Ok(Self::from_raw_saturating(self.raw as i64 + other.raw as i64, self.format))
    }

    pub fn sub_sat(self, other: FxPValue) -> Result<Self, FxpError> {
        self.check_same(other)?;
        Ok(Self::from_raw_saturating(self.raw as i64 - other.raw as i64, self.format))
    }

    pub fn neg_sat(self) -> Self {
        Self::from_raw_saturating(-(self.raw as i64), self.format)
    }

    /// Arithmetic right shift; rounds toward negative infinity.
    pub fn shift_right_arith(self, shift: u32) -> Result<Self, FxpError> {
        if shift >= self.format.total_bits() {
            return Err(FxpError::ShiftOutOfRange { shift, format: self.format });
        }
        Ok(FxPValue { raw: self.raw >> shift, format: self.format })
    }

    /// Re-express in another format (rounding and saturating as needed).
    pub fn convert(self, format: FxPFormat) -> Self {
        let from = self.format.frac_bits() as i32;
        let to = format.frac_bits() as i32;
        let raw = if to >= from {
            (self.raw as i64) << (to - from)
        } else {
            round_shift_right(self.raw as i128, (from - to) as u32) as i64
        };
        Self::from_raw_saturating(raw, format)
    }
}

impl fmt::Display for FxPValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}, raw {})", self.to_f64(), self.format, self.raw)
    }
}

/// `value / 2^shift` rounded to nearest, ties away from zero.
pub fn round_shift_right(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    let half = 1i128 << (shift - 1);
    if value >= 0 {
        (value + half) >> shift
    } else {
        -((-value + half) >> shift)
    }
}

/// `value / 2^shift` truncated toward zero. Keeps negation symmetric.
pub fn trunc_shift_right(value: i64, shift: u32) -> i64 {
    if shift >= 63 {
        return 0;
    }
    if value >= 0 {
        value >> shift
    } else {
        -((-value) >> shift)
    }
}

/// Shift by a signed amount: left for positive, truncating right for negative.
pub fn shift_signed(value: i64, shift: i32) -> i64 {
    if shift >= 0 {
        value << shift
    } else {
        trunc_shift_right(value, (-shift) as u32)
    }
}

/// Smallest `k >= 0` with `2^k >= n`; `ceil_log2(1) == 0`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}
