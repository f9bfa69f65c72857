//! FP16 handling and the FP16 -> BFP group conversion primitives.
//!
//! A BFP group stores one 5-bit shared exponent `E` and, per element, a sign
//! bit plus an `m`-bit magnitude. Element `i` reconstructs to
//! `sign_i * magnitude_i * 2^(E - (m - 1))`. Conversion picks `E` as the
//! largest FP16 exponent in the group and right-shifts every significand to
//! that exponent, truncating toward zero.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{HarmoniaError, Result};
use crate::grouping::{group_tensor, GroupAxis};
use crate::tensor::Tensor;

/// Width of the shared exponent field.
pub const EXPONENT_BITS: u32 = 5;
/// Smallest shared exponent (the FP16 minimum normal exponent).
pub const MIN_EXPONENT: i32 = -14;
/// Largest shared exponent.
pub const MAX_EXPONENT: i32 = 15;
/// Largest supported magnitude width.
pub const MAX_MANTISSA_BITS: u32 = 10;

const FP16_FRACTION_BITS: u32 = 10;
const FP16_BIAS: i32 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BfpConfig {
    pub group_size: usize,
    pub mantissa_bits: u32,
}

impl Default for BfpConfig {
    fn default() -> Self {
        Self {
            group_size: 32,
            mantissa_bits: 8,
        }
    }
}

impl BfpConfig {
    pub fn new(group_size: usize, mantissa_bits: u32) -> Result<Self> {
        let cfg = Self {
            group_size,
            mantissa_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(HarmoniaError::arg("group size must be positive"));
        }
        if !(1..=MAX_MANTISSA_BITS).contains(&self.mantissa_bits) {
            return Err(HarmoniaError::arg(format!(
                "mantissa bits {} outside 1..={MAX_MANTISSA_BITS}",
                self.mantissa_bits
            )));
        }
        Ok(())
    }

    pub fn with_mantissa_bits(self, mantissa_bits: u32) -> Self {
        Self {
            mantissa_bits,
            ..self
        }
    }
}

/// Decomposed finite FP16 value: `(-1)^negative * significand * 2^(exponent - 10)`.
///
/// Subnormals report exponent -14 with no implicit bit. Zero has significand 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HalfParts {
    pub negative: bool,
    pub exponent: i32,
    pub significand: u32,
}

pub fn half_parts(h: f16) -> Result<HalfParts> {
    let bits = h.to_bits();
    let field = ((bits >> FP16_FRACTION_BITS) & 0x1f) as i32;
    let fraction = u32::from(bits & 0x3ff);
    if field == 0x1f {
        return Err(HarmoniaError::InvalidValue(format!(
            "non-finite FP16 pattern {bits:#06x}"
        )));
    }
    let (exponent, significand) = if field == 0 {
        (MIN_EXPONENT, fraction)
    } else {
        (field - FP16_BIAS, fraction | (1 << FP16_FRACTION_BITS))
    };
    Ok(HalfParts {
        // -0 normalizes to +0
        negative: bits & 0x8000 != 0 && significand != 0,
        exponent,
        significand,
    })
}

/// Round-to-nearest-even conversion from `f64` to FP16, overflowing to
/// infinity. Rounds once, independent of any hardware conversion path.
pub fn round_to_half(v: f64) -> f16 {
    if v.is_nan() {
        return f16::NAN;
    }
    let a = v.abs();
    // halfway between 65504 and 65536 rounds to the even neighbour, 65536
    let mag = if a >= 65520.0 {
        f16::INFINITY
    } else {
        let quantum_exp = if a < 2f64.powi(MIN_EXPONENT) {
            MIN_EXPONENT - FP16_FRACTION_BITS as i32
        } else {
            (((a.to_bits() >> 52) & 0x7ff) as i32 - 1023) - FP16_FRACTION_BITS as i32
        };
        let steps = (a * 2f64.powi(-quantum_exp)).round_ties_even();
        // exactly representable, so any conversion path is exact here
        f16::from_f64(steps * 2f64.powi(quantum_exp))
    };
    if v.is_sign_negative() {
        -mag
    } else {
        mag
    }
}

/// Rounds to FP16, rejecting values that become infinite or NaN.
pub fn to_half_checked(v: f64) -> Result<f16> {
    let h = round_to_half(v);
    if h.is_finite() {
        Ok(h)
    } else {
        Err(HarmoniaError::InvalidValue(format!(
            "{v} is not representable as finite FP16"
        )))
    }
}

/// A group of elements sharing one exponent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BfpGroup {
    shared_exponent: i32,
    mantissa_bits: u32,
    negative: Vec<bool>,
    magnitudes: Vec<u16>,
}

impl BfpGroup {
    /// Builds a group from raw fields, checking the field ranges.
    pub fn from_parts(
        shared_exponent: i32,
        mantissa_bits: u32,
        negative: Vec<bool>,
        magnitudes: Vec<u16>,
    ) -> Result<Self> {
        if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&shared_exponent) {
            return Err(HarmoniaError::arg(format!(
                "shared exponent {shared_exponent} out of range"
            )));
        }
        if !(1..=MAX_MANTISSA_BITS).contains(&mantissa_bits) {
            return Err(HarmoniaError::arg(format!(
                "mantissa bits {mantissa_bits} out of range"
            )));
        }
        if negative.len() != magnitudes.len() {
            return Err(HarmoniaError::shape("sign and magnitude lengths differ"));
        }
        if let Some(&bad) = magnitudes
            .iter()
            .find(|&&m| u32::from(m) >> mantissa_bits != 0)
        {
            return Err(HarmoniaError::arg(format!(
                "magnitude {bad} does not fit in {mantissa_bits} bits"
            )));
        }
        Ok(Self {
            shared_exponent,
            mantissa_bits,
            negative,
            magnitudes,
        })
    }

    #[inline]
    pub fn shared_exponent(&self) -> i32 {
        self.shared_exponent
    }

    #[inline]
    pub fn mantissa_bits(&self) -> u32 {
        self.mantissa_bits
    }

    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }

    pub fn negative(&self) -> &[bool] {
        &self.negative
    }

    pub fn magnitudes(&self) -> &[u16] {
        &self.magnitudes
    }

    /// Exponent of one unit in the last magnitude place: `E - (m - 1)`.
    #[inline]
    pub fn lsb_exponent(&self) -> i32 {
        self.shared_exponent - (self.mantissa_bits as i32 - 1)
    }

    /// Signed integer mantissa of element `i`.
    #[inline]
    pub fn signed_mantissa(&self, i: usize) -> i32 {
        let m = i32::from(self.magnitudes[i]);
        if self.negative[i] {
            -m
        } else {
            m
        }
    }

    /// Reconstructed value of every element. Exact: all values are dyadic.
    pub fn dequantize(&self) -> Vec<f64> {
        let lsb = 2f64.powi(self.lsb_exponent());
        (0..self.len())
            .map(|i| {
                let v = f64::from(self.magnitudes[i]) * lsb;
                if self.negative[i] {
                    -v
                } else {
                    v
                }
            })
            .collect()
    }

    /// Demotes the group to `new_bits` by right-shifting every magnitude.
    pub fn truncate_mantissas(&self, new_bits: u32) -> Result<BfpGroup> {
        if new_bits == 0 || new_bits >= self.mantissa_bits {
            return Err(HarmoniaError::arg(format!(
                "cannot truncate {}-bit mantissas to {new_bits} bits",
                self.mantissa_bits
            )));
        }
        let shift = self.mantissa_bits - new_bits;
        Ok(BfpGroup {
            shared_exponent: self.shared_exponent,
            mantissa_bits: new_bits,
            negative: self.negative.clone(),
            magnitudes: self.magnitudes.iter().map(|&m| m >> shift).collect(),
        })
    }
}

/// Largest exponent over the nonzero elements, or [`MIN_EXPONENT`] when all
/// elements are zero.
pub fn max_exponent(values: &[f16]) -> Result<i32> {
    let mut e = MIN_EXPONENT;
    for &v in values {
        let p = half_parts(v)?;
        if p.significand != 0 {
            e = e.max(p.exponent);
        }
    }
    Ok(e)
}

/// Aligns every significand to `shared_exponent` ("right-shift and
/// truncate"). `shared_exponent` must not be below any element exponent.
pub fn align_to_exponent(
    values: &[f16],
    shared_exponent: i32,
    mantissa_bits: u32,
) -> Result<BfpGroup> {
    if !(1..=MAX_MANTISSA_BITS).contains(&mantissa_bits) {
        return Err(HarmoniaError::arg(format!(
            "mantissa bits {mantissa_bits} out of range"
        )));
    }
    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&shared_exponent) {
        return Err(HarmoniaError::arg(format!(
            "shared exponent {shared_exponent} out of range"
        )));
    }
    let mut negative = Vec::with_capacity(values.len());
    let mut magnitudes = Vec::with_capacity(values.len());
    for &v in values {
        let p = half_parts(v)?;
        if p.significand != 0 && p.exponent > shared_exponent {
            return Err(HarmoniaError::arg(format!(
                "element exponent {} exceeds shared exponent {shared_exponent}",
                p.exponent
            )));
        }
        // significand has 11 bits, keep the top `m` relative to E
        let shift =
            (shared_exponent - p.exponent) as u32 + (FP16_FRACTION_BITS + 1 - mantissa_bits);
        let mag = if shift >= u32::BITS {
            0
        } else {
            p.significand >> shift
        };
        negative.push(p.negative);
        magnitudes.push(mag as u16);
    }
    Ok(BfpGroup {
        shared_exponent,
        mantissa_bits,
        negative,
        magnitudes,
    })
}

/// Converts up to `cfg.group_size` FP16 values into one BFP group.
pub fn convert_group(values: &[f16], cfg: &BfpConfig) -> Result<BfpGroup> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(HarmoniaError::EmptyInput);
    }
    if values.len() > cfg.group_size {
        return Err(HarmoniaError::shape(format!(
            "{} values exceed group size {}",
            values.len(),
            cfg.group_size
        )));
    }
    let e = max_exponent(values)?;
    align_to_exponent(values, e, cfg.mantissa_bits)
}

/// Rounds `values` to FP16 and converts them as one group.
pub fn convert_group_f64(values: &[f64], cfg: &BfpConfig) -> Result<BfpGroup> {
    let halves = values
        .iter()
        .map(|&v| to_half_checked(v))
        .collect::<Result<Vec<_>>>()?;
    convert_group(&halves, cfg)
}

pub fn dequantize_group(g: &BfpGroup) -> Vec<f64> {
    g.dequantize()
}

pub fn truncate_mantissas(g: &BfpGroup, new_bits: u32) -> Result<BfpGroup> {
    g.truncate_mantissas(new_bits)
}

/// An 8-bit sign-magnitude mantissa split into two 4-bit halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMantissa {
    pub negative: bool,
    pub hi: u8,
    pub lo: u8,
}

/// Splits an 8-bit magnitude into high and low nibbles, sign on both.
pub fn split_mantissa(negative: bool, magnitude: u16) -> Result<SplitMantissa> {
    if magnitude >= 256 {
        return Err(HarmoniaError::arg(format!(
            "magnitude {magnitude} does not fit in 8 bits"
        )));
    }
    Ok(SplitMantissa {
        negative,
        hi: (magnitude >> 4) as u8,
        lo: (magnitude & 0xf) as u8,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub max_abs: f64,
    /// Largest `|x - x_hat| / |x|` over nonzero elements.
    pub max_rel: f64,
}

impl ErrorMetrics {
    pub fn between(reference: &[f64], approx: &[f64]) -> Self {
        let mut sq = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (&r, &a) in reference.iter().zip(approx) {
            let d = (r - a).abs();
            sq += d * d;
            max_abs = max_abs.max(d);
            if r != 0.0 {
                max_rel = max_rel.max(d / r.abs());
            }
        }
        let n = reference.len().max(1) as f64;
        Self {
            mse: sq / n,
            max_abs,
            max_rel,
        }
    }
}

/// Conversion error of `x` under the given grouping. The reference is the
/// FP16 rounding of `x`, i.e. the values the converter actually sees.
pub fn quantization_error(x: &Tensor, cfg: &BfpConfig, axis: GroupAxis) -> Result<ErrorMetrics> {
    let grouped = group_tensor(x, axis, cfg)?;
    let reference = x.round_to_half();
    let approx = grouped.dequantize();
    Ok(ErrorMetrics::between(reference.data(), approx.data()))
}
