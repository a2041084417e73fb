//! IEEE-754 binary16 encode/decode.
//!
//! Two rounding modes: deterministic round-to-nearest-even and stochastic
//! rounding (rounds to one of the two neighboring representable values with
//! probability proportional to proximity, so the expected decoded value
//! equals the input). Values beyond the binary16 finite range are clamped to
//! ±65504 instead of overflowing to infinity; callers count clamp events via
//! [`would_clamp`]. Subnormals are fully supported so small residual
//! corrections survive quantization.

use crate::tensor::SeededRng;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f32),
    #[error("stochastic rounding requires an rng")]
    MissingRng,
}

/// Rounding rule applied when narrowing float32 to binary16.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundingMode {
    NearestEven,
    Stochastic,
}

/// A binary16 value stored as its raw bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Half(u16);

impl Half {
    /// Largest finite binary16 magnitude.
    pub const MAX_FINITE: f32 = 65504.0;

    pub fn from_bits(bits: u16) -> Self {
        Half(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        (self.0 >> 10) & 0x1F != 0x1F
    }

    pub fn to_f32(self) -> f32 {
        decode(self)
    }

    /// Wire form: 2 bytes, little-endian.
    pub fn to_le_bytes(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 2]) -> Self {
        Half(u16::from_le_bytes(bytes))
    }
}

/// True when encoding `x` clamps to ±65504.
pub fn would_clamp(x: f32) -> bool {
    x.abs() > Half::MAX_FINITE
}

/// Narrow a finite float32 to binary16.
///
/// `NearestEven` implements IEEE ties-to-even semantics; `Stochastic` is
/// unbiased and consumes one draw from `rng`. NaN and infinity are rejected;
/// finite values beyond ±65504 clamp.
pub fn encode(x: f32, mode: RoundingMode, rng: Option<&mut SeededRng>) -> Result<Half, CodecError> {
    if !x.is_finite() {
        return Err(CodecError::NonFinite(x));
    }
    let clamped = x.clamp(-Half::MAX_FINITE, Half::MAX_FINITE);
    match mode {
        RoundingMode::NearestEven => Ok(Half(to_bits_nearest(clamped))),
        RoundingMode::Stochastic => {
            let rng = rng.ok_or(CodecError::MissingRng)?;
            Ok(Half(to_bits_stochastic(clamped, rng)))
        }
    }
}

/// Widen binary16 to float32. Exact for every code, including subnormals.
pub fn decode(h: Half) -> f32 {
    let bits = h.0;
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1F) as u32;
    let man = (bits & 0x03FF) as u32;

    if exp == 0x1F {
        return if man == 0 {
            f32::from_bits(sign | 0x7F80_0000)
        } else {
            f32::from_bits(sign | 0x7FC0_0000 | (man << 13))
        };
    }
    if exp == 0 {
        if man == 0 {
            return f32::from_bits(sign);
        }
        // subnormal: value = man * 2^-24, renormalized for the f32 field
        let lead = (man as u16).leading_zeros() - 6; // 0..=9
        let exp32 = (127 - 15 - lead) << 23;
        let man32 = (man << (14 + lead)) & 0x007F_FFFF;
        return f32::from_bits(sign | exp32 | man32);
    }
    let exp32 = (exp + (127 - 15)) << 23;
    f32::from_bits(sign | exp32 | (man << 13))
}

/// Round-to-nearest-even narrowing. Caller guarantees `x` is finite with
/// |x| <= 65504.
fn to_bits_nearest(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp32 = ((bits >> 23) & 0xFF) as i32;
    let man32 = bits & 0x007F_FFFF;

    // f32 subnormals are below half the smallest binary16 subnormal
    if exp32 == 0 {
        return sign;
    }
    let half_exp = exp32 - 127 + 15;
    debug_assert!(half_exp < 0x1F);

    if half_exp <= 0 {
        let shift = (14 - half_exp) as u32;
        if shift > 24 {
            return sign;
        }
        let man = man32 | 0x0080_0000;
        let mut half_man = man >> shift;
        let round_bit = 1u32 << (shift - 1);
        // round bit set and (sticky below it or result lsb odd)
        if (man & round_bit) != 0 && (man & (3 * round_bit - 1)) != 0 {
            half_man += 1;
        }
        return sign | half_man as u16;
    }

    let mut out = ((half_exp as u32) << 10) | (man32 >> 13);
    let round_bit = 0x0000_1000u32;
    if (bits & round_bit) != 0 && (bits & (3 * round_bit - 1)) != 0 {
        out += 1;
    }
    sign | out as u16
}

/// Round-toward-zero narrowing of a non-negative magnitude: the largest
/// representable binary16 not exceeding it.
fn mag_to_bits_trunc(mag_bits: u32) -> u16 {
    let exp32 = ((mag_bits >> 23) & 0xFF) as i32;
    let man32 = mag_bits & 0x007F_FFFF;
    if exp32 == 0 {
        return 0;
    }
    let half_exp = exp32 - 127 + 15;
    if half_exp <= 0 {
        let shift = (14 - half_exp) as u32;
        if shift > 24 {
            return 0;
        }
        return ((man32 | 0x0080_0000) >> shift) as u16;
    }
    (((half_exp as u32) << 10) | (man32 >> 13)) as u16
}

/// Unbiased stochastic rounding between the two neighboring codes. Caller
/// guarantees `x` is finite with |x| <= 65504.
fn to_bits_stochastic(x: f32, rng: &mut SeededRng) -> u16 {
    let sign = if x.is_sign_negative() { 0x8000u16 } else { 0 };
    let ax = x.abs();
    let lo = mag_to_bits_trunc(ax.to_bits());
    let lo_val = decode(Half(lo));
    if lo_val == ax {
        return sign | lo;
    }
    // ax < 65504 here, so the next magnitude code is still finite
    let hi = lo + 1;
    let hi_val = decode(Half(hi));
    let p_up = (ax as f64 - lo_val as f64) / (hi_val as f64 - lo_val as f64);
    let u: f64 = rng.random();
    if u < p_up {
        sign | hi
    } else {
        sign | lo
    }
}
