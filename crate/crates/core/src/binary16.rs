//! IEEE 754 binary16 codec used as the half-precision communication wire
//! format.
//!
//! Encoding rounds to nearest, ties to even. Values whose magnitude would
//! round past the largest finite half (65504) saturate to ±65504 instead of
//! producing an infinity, so simulated all-reduce totals stay finite and
//! error bounds stay statable. Decoding widens exactly; NaN patterns are
//! rejected because communication payloads must be numeric.

use crate::error::{Error, Result};

/// Largest finite binary16 value.
pub const MAX_FINITE: f64 = 65504.0;
/// Bit pattern of [`MAX_FINITE`].
pub const MAX_FINITE_BITS: u16 = 0x7BFF;
/// Smallest magnitude that rounds to infinity under unsaturated
/// round-to-nearest-even (midpoint between 65504 and the next step).
const OVERFLOW_THRESHOLD: f64 = 65520.0;

/// Exact power of two via direct exponent construction, `k` in the normal
/// f64 range.
fn exp2i(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Encode a finite `f64` as binary16 (round to nearest even, saturating).
pub fn to_binary16(x: f64) -> Result<u16> {
    Ok(to_binary16_with_saturation(x)?.0)
}

/// Like [`to_binary16`], additionally reporting whether the value saturated.
pub fn to_binary16_with_saturation(x: f64) -> Result<(u16, bool)> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: "binary16 encode",
            index: 0,
        });
    }
    let bits = x.to_bits();
    let sign = ((bits >> 48) & 0x8000) as u16;
    let abs = x.abs();
    if abs == 0.0 {
        return Ok((sign, false));
    }
    if abs >= OVERFLOW_THRESHOLD {
        return Ok((sign | MAX_FINITE_BITS, true));
    }

    let biased_exp = ((bits >> 52) & 0x7FF) as i32;
    let mantissa = bits & 0x000F_FFFF_FFFF_FFFF;

    // f64 subnormals are below 2^-1022, far under the smallest half
    // subnormal (2^-24); they round to signed zero.
    if biased_exp == 0 {
        return Ok((sign, false));
    }
    let exp = biased_exp - 1023;

    if exp >= -14 {
        // Normal half range: keep the top 10 of 52 mantissa bits.
        let keep = mantissa >> 42;
        let rem = mantissa & ((1u64 << 42) - 1);
        let halfway = 1u64 << 41;
        let mut m = keep;
        if rem > halfway || (rem == halfway && (m & 1) == 1) {
            m += 1;
        }
        let mut e = exp;
        if m == 1024 {
            m = 0;
            e += 1;
        }
        // e <= 15 is guaranteed by the overflow threshold above.
        debug_assert!(e <= 15);
        let pattern = sign | (((e + 15) as u16) << 10) | m as u16;
        Ok((pattern, false))
    } else {
        // Subnormal target: round abs to an integer multiple of 2^-24.
        // abs = (2^52 + mantissa) * 2^(exp - 52), so the scaled significand
        // is (2^52 + mantissa) >> (28 - exp) with round-to-nearest-even.
        let sig = (1u64 << 52) | mantissa;
        let shift = 28 - exp; // >= 43 here
        if shift >= 54 {
            // Entire significand is below half of the smallest subnormal.
            return Ok((sign, false));
        }
        let shift = shift as u32;
        let keep = sig >> shift;
        let rem = sig & ((1u64 << shift) - 1);
        let halfway = 1u64 << (shift - 1);
        let mut n = keep;
        if rem > halfway || (rem == halfway && (n & 1) == 1) {
            n += 1;
        }
        // n == 1024 encodes as the smallest normal, which is exactly the
        // pattern arithmetic below.
        Ok((sign | n as u16, false))
    }
}

/// Decode a binary16 pattern to `f64`. Exact for every non-NaN pattern;
/// infinity patterns widen to infinities (the encoder never produces them).
pub fn from_binary16(pattern: u16) -> Result<f64> {
    let sign = if pattern & 0x8000 != 0 { -1.0 } else { 1.0 };
    let e = (pattern >> 10) & 0x1F;
    let m = (pattern & 0x03FF) as f64;
    let value = match e {
        0x1F => {
            if pattern & 0x03FF != 0 {
                return Err(Error::NanPattern { pattern });
            }
            f64::INFINITY
        }
        0 => m * exp2i(-24),
        _ => (1024.0 + m) * exp2i(e as i32 - 25),
    };
    Ok(sign * value)
}
