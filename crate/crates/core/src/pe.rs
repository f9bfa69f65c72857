//! Bit-accurate emulation of the reconfigurable PE.
//!
//! Three MAC modes are supported:
//!
//! - `M8W4`: 8-bit-mantissa BFP activations against group-wise INT4 weights.
//! - `M8M4`: 8-bit against 4-bit mantissa BFP activations.
//! - `M8M8`: 8-bit against 8-bit, executed as two M8M4 passes over the high
//!   and low nibbles of the second operand and fused as `16 * hi + lo`.
//!
//! Intra-group dot products are exact integers. Each group result is scaled
//! by its exponents (and weight scale) and rounded once to FP16; partials are
//! then summed left to right in FP32.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{HarmoniaError, Result};
use crate::grouping::{BfpTensor, GroupAxis};
use crate::numerics::{half_parts, round_to_half, split_mantissa, BfpGroup};
use crate::tensor::Tensor;

/// Default number of input rows sharing one weight scale.
pub const WEIGHT_GROUP_SIZE: usize = 128;
const INT4_MIN: i8 = -8;
const INT4_MAX: i8 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGroup {
    q: Vec<i8>,
    scale: f16,
}

impl WeightGroup {
    pub fn new(q: Vec<i8>, scale: f16) -> Result<Self> {
        if q.iter().any(|v| !(INT4_MIN..=INT4_MAX).contains(v)) {
            return Err(HarmoniaError::arg("weight outside INT4 range"));
        }
        if !scale.is_finite() || scale.to_f64() <= 0.0 {
            return Err(HarmoniaError::InvalidValue(format!("weight scale {scale}")));
        }
        Ok(Self { q, scale })
    }

    pub fn q(&self) -> &[i8] {
        &self.q
    }

    pub fn scale(&self) -> f16 {
        self.scale
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let s = self.scale.to_f64();
        self.q.iter().map(|&q| f64::from(q) * s).collect()
    }
}

/// Symmetric absmax INT4 quantization of one group.
///
/// `scale = max|w| / 7` (1 for an all-zero group), rounded to FP16, and
/// `q = round_half_away(w / scale)` clamped to `[-8, 7]`.
pub fn quantize_group(values: &[f64]) -> Result<WeightGroup> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(HarmoniaError::InvalidValue("non-finite weight".into()));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max == 0.0 {
        f16::ONE
    } else {
        let s = round_to_half(max / f64::from(INT4_MAX));
        if !s.is_finite() {
            return Err(HarmoniaError::InvalidValue(format!(
                "weight scale for max {max} overflows FP16"
            )));
        }
        if s.to_f64() == 0.0 {
            f16::from_bits(1)
        } else {
            s
        }
    };
    let s = scale.to_f64();
    let q = values
        .iter()
        .map(|&w| {
            (w / s)
                .round()
                .clamp(f64::from(INT4_MIN), f64::from(INT4_MAX)) as i8
        })
        .collect();
    WeightGroup::new(q, scale)
}

/// An `in_dim x out_dim` weight matrix quantized along the input dimension.
///
/// `groups[n * groups_per_column + g]` holds rows `g * group_size ..` of
/// output column `n`. The last group of a column may be shorter.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantWeights {
    in_dim: usize,
    out_dim: usize,
    group_size: usize,
    groups: Vec<WeightGroup>,
}

impl QuantWeights {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_column(&self) -> usize {
        self.in_dim.div_ceil(self.group_size)
    }

    pub fn column(&self, n: usize) -> &[WeightGroup] {
        let g = self.groups_per_column();
        &self.groups[n * g..(n + 1) * g]
    }

    pub fn dequantize(&self) -> Tensor {
        let mut out = Tensor::zeros(self.in_dim, self.out_dim);
        for n in 0..self.out_dim {
            for (g, wg) in self.column(n).iter().enumerate() {
                for (j, v) in wg.dequantize().into_iter().enumerate() {
                    out.set(g * self.group_size + j, n, v);
                }
            }
        }
        out
    }

    /// Weight slice and scale for input rows `start..start + len` of column `n`.
    pub fn slice(&self, n: usize, start: usize, len: usize) -> Result<(&[i8], f16)> {
        let g = start / self.group_size;
        let off = start % self.group_size;
        let col = self.column(n);
        match col.get(g) {
            Some(wg) if off + len <= wg.q.len() => Ok((&wg.q[off..off + len], wg.scale)),
            _ => Err(HarmoniaError::shape(format!(
                "activation group {start}..{} straddles weight groups of {}",
                start + len,
                self.group_size
            ))),
        }
    }

    /// Storage cost per weight: 4 bits plus an amortized FP16 scale.
    pub fn bits_per_element(&self) -> f64 {
        4.0 + 16.0 / self.group_size as f64
    }
}

pub fn quantize_weights(w: &Tensor, group_size: usize) -> Result<QuantWeights> {
    if group_size == 0 {
        return Err(HarmoniaError::arg("weight group size must be positive"));
    }
    let (in_dim, out_dim) = w.shape();
    let mut groups = Vec::with_capacity(out_dim * in_dim.div_ceil(group_size));
    for n in 0..out_dim {
        let col = w.column(n);
        for chunk in col.chunks(group_size) {
            groups.push(quantize_group(chunk)?);
        }
    }
    Ok(QuantWeights {
        in_dim,
        out_dim,
        group_size,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacMode {
    M8W4,
    M8M4,
    M8M8,
}

impl MacMode {
    /// The BFP-BFP mode for a pair of activation groups.
    pub fn for_groups(a: &BfpGroup, b: &BfpGroup) -> Result<MacMode> {
        match (a.mantissa_bits(), b.mantissa_bits()) {
            (8, 8) => Ok(MacMode::M8M8),
            (8, 4) => Ok(MacMode::M8M4),
            (ma, mb) => Err(HarmoniaError::arg(format!(
                "no MAC mode for {ma}-bit x {mb}-bit mantissas"
            ))),
        }
    }
}

/// One group's FP16 result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialSum {
    pub value: f16,
    pub overflow: bool,
}

impl PartialSum {
    pub const ZERO: PartialSum = PartialSum {
        value: f16::ZERO,
        overflow: false,
    };
}

/// Rounds `dot * 2^exp2 * scale` to FP16 once, saturating on overflow.
fn to_partial(dot: i64, exp2: i32, scale: Option<f16>) -> PartialSum {
    let (sig, scale_exp) = match scale {
        Some(s) => {
            // validated positive and finite at construction
            let p = half_parts(s).expect("finite scale");
            (i64::from(p.significand), p.exponent - 10)
        }
        None => (1, 0),
    };
    // |dot| < 2^22 and sig < 2^11, so the product is exact in f64
    let exact = (dot * sig) as f64 * 2f64.powi(exp2 + scale_exp);
    let h = round_to_half(exact);
    if h.is_infinite() {
        PartialSum {
            value: if exact < 0.0 { -f16::MAX } else { f16::MAX },
            overflow: true,
        }
    } else {
        PartialSum {
            value: h,
            overflow: false,
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(HarmoniaError::shape(format!(
            "operand lengths {a} and {b} differ"
        )));
    }
    Ok(())
}

fn check_bits(g: &BfpGroup, bits: u32, role: &str) -> Result<()> {
    if g.mantissa_bits() != bits {
        return Err(HarmoniaError::arg(format!(
            "{role} operand has {}-bit mantissas, expected {bits}",
            g.mantissa_bits()
        )));
    }
    Ok(())
}

/// Exact integer dot product of two sign-magnitude groups.
pub fn integer_dot(a: &BfpGroup, b: &BfpGroup) -> Result<i64> {
    check_lengths(a.len(), b.len())?;
    Ok((0..a.len())
        .map(|i| i64::from(a.signed_mantissa(i)) * i64::from(b.signed_mantissa(i)))
        .sum())
}

/// Dot of an activation group against INT4 weights.
pub fn integer_dot_int4(a: &BfpGroup, q: &[i8]) -> Result<i64> {
    check_lengths(a.len(), q.len())?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, &w)| i64::from(a.signed_mantissa(i)) * i64::from(w))
        .sum())
}

pub fn mac_m8w4(a: &BfpGroup, q: &[i8], scale: f16) -> Result<PartialSum> {
    check_bits(a, 8, "activation")?;
    if !scale.is_finite() || scale.to_f64() <= 0.0 {
        return Err(HarmoniaError::InvalidValue(format!("weight scale {scale}")));
    }
    let d = integer_dot_int4(a, q)?;
    Ok(to_partial(d, a.lsb_exponent(), Some(scale)))
}

pub fn mac_m8m4(a: &BfpGroup, b: &BfpGroup) -> Result<PartialSum> {
    check_bits(a, 8, "first")?;
    check_bits(b, 4, "second")?;
    let d = integer_dot(a, b)?;
    Ok(to_partial(d, a.lsb_exponent() + b.lsb_exponent(), None))
}

/// The two 4-bit halves of an 8-bit group, as the M8M4 wrappers see them.
///
/// Both halves keep the original shared exponent; the low half carries an
/// implicit extra factor of 2^-4, applied when the dots are fused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NibbleHalves {
    pub hi: BfpGroup,
    pub lo: BfpGroup,
}

pub fn split_group(b: &BfpGroup) -> Result<NibbleHalves> {
    check_bits(b, 8, "split")?;
    let mut hi = Vec::with_capacity(b.len());
    let mut lo = Vec::with_capacity(b.len());
    for (&neg, &mag) in b.negative().iter().zip(b.magnitudes()) {
        let s = split_mantissa(neg, mag)?;
        hi.push(u16::from(s.hi));
        lo.push(u16::from(s.lo));
    }
    let e = b.shared_exponent();
    Ok(NibbleHalves {
        hi: BfpGroup::from_parts(e, 4, b.negative().to_vec(), hi)?,
        lo: BfpGroup::from_parts(e, 4, b.negative().to_vec(), lo)?,
    })
}

/// Accumulator fusion of the high- and low-nibble dots.
#[inline]
pub fn fuse_nibble_dots(hi: i64, lo: i64) -> i64 {
    16 * hi + lo
}

/// The fused M8M8 integer dot, computed through the nibble split.
pub fn nibble_dot(a: &BfpGroup, b: &BfpGroup) -> Result<i64> {
    let halves = split_group(b)?;
    Ok(fuse_nibble_dots(
        integer_dot(a, &halves.hi)?,
        integer_dot(a, &halves.lo)?,
    ))
}

pub fn mac_m8m8(a: &BfpGroup, b: &BfpGroup) -> Result<PartialSum> {
    check_bits(a, 8, "first")?;
    let d = nibble_dot(a, b)?;
    Ok(to_partial(d, a.lsb_exponent() + b.lsb_exponent(), None))
}

/// Dispatches a BFP-BFP MAC by mode.
pub fn mac_bfp(mode: MacMode, a: &BfpGroup, b: &BfpGroup) -> Result<PartialSum> {
    match mode {
        MacMode::M8M4 => mac_m8m4(a, b),
        MacMode::M8M8 => mac_m8m8(a, b),
        MacMode::M8W4 => Err(HarmoniaError::arg("M8W4 needs INT4 weights")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accumulated {
    pub value: f32,
    pub overflow: bool,
}

/// Left-to-right FP32 sum of FP16 partials. Overflow flags are sticky.
pub fn accumulate(partials: &[PartialSum]) -> Accumulated {
    let mut acc = 0.0f32;
    let mut overflow = false;
    for p in partials {
        acc += p.value.to_f32();
        overflow |= p.overflow;
    }
    Accumulated {
        value: acc,
        overflow,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub m8w4: u64,
    pub m8m4: u64,
    pub m8m8: u64,
}

impl ModeCounts {
    fn bump(&mut self, mode: MacMode) {
        match mode {
            MacMode::M8W4 => self.m8w4 += 1,
            MacMode::M8M4 => self.m8m4 += 1,
            MacMode::M8M8 => self.m8m8 += 1,
        }
    }
}

/// FP32 GEMM result with per-output overflow flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmOutput {
    pub values: Tensor,
    pub overflow: Vec<bool>,
    pub modes: ModeCounts,
}

impl GemmOutput {
    pub fn overflow_count(&self) -> usize {
        self.overflow.iter().filter(|&&o| o).count()
    }
}

/// Output-stationary BFP x INT4 GEMM. Each entry of `a_rows` is one
/// activation row as consecutive groups along the inner dimension.
pub fn gemm_m8w4_rows(a_rows: &[Vec<&BfpGroup>], w: &QuantWeights) -> Result<GemmOutput> {
    let m = a_rows.len();
    let n = w.out_dim();
    let mut values = Tensor::zeros(m, n);
    let mut overflow = vec![false; m * n];
    let mut modes = ModeCounts::default();
    let mut partials = Vec::new();
    for (i, row) in a_rows.iter().enumerate() {
        let inner: usize = row.iter().map(|g| g.len()).sum();
        if inner != w.in_dim() {
            return Err(HarmoniaError::shape(format!(
                "activation row of {inner} against {} weight rows",
                w.in_dim()
            )));
        }
        for col in 0..n {
            partials.clear();
            let mut start = 0;
            for g in row {
                let (q, scale) = w.slice(col, start, g.len())?;
                partials.push(mac_m8w4(g, q, scale)?);
                modes.bump(MacMode::M8W4);
                start += g.len();
            }
            let acc = accumulate(&partials);
            values.set(i, col, f64::from(acc.value));
            overflow[i * n + col] = acc.overflow;
        }
    }
    Ok(GemmOutput {
        values,
        overflow,
        modes,
    })
}

/// `A x W` for a per-token grouped activation tensor.
pub fn gemm_m8w4(a: &BfpTensor, w: &QuantWeights) -> Result<GemmOutput> {
    if a.axis() != GroupAxis::PerToken {
        return Err(HarmoniaError::layout(
            "M8W4 activations must be grouped per token",
        ));
    }
    let rows: Vec<Vec<&BfpGroup>> = (0..a.shape().0).map(|r| a.row_groups(r)).collect();
    gemm_m8w4_rows(&rows, w)
}

/// Output-stationary BFP x BFP GEMM. `a_rows[i]` and `b_cols[j]` are
/// sequences of groups along the shared inner dimension; output `(i, j)`
/// accumulates their pairwise MACs in ascending group order. The mode of
/// each MAC follows the mantissa width of the `b` group.
pub fn gemm_bfp(a_rows: &[Vec<&BfpGroup>], b_cols: &[Vec<&BfpGroup>]) -> Result<GemmOutput> {
    let m = a_rows.len();
    let n = b_cols.len();
    let mut values = Tensor::zeros(m, n);
    let mut overflow = vec![false; m * n];
    let mut modes = ModeCounts::default();
    let mut partials = Vec::new();
    for (i, a) in a_rows.iter().enumerate() {
        for (j, b) in b_cols.iter().enumerate() {
            if a.len() != b.len() {
                return Err(HarmoniaError::shape(format!(
                    "{} groups against {} groups",
                    a.len(),
                    b.len()
                )));
            }
            partials.clear();
            for (ga, gb) in a.iter().zip(b) {
                if ga.len() != gb.len() {
                    return Err(HarmoniaError::shape("group boundaries misaligned"));
                }
                let mode = MacMode::for_groups(ga, gb)?;
                partials.push(mac_bfp(mode, ga, gb)?);
                modes.bump(mode);
            }
            let acc = accumulate(&partials);
            values.set(i, j, f64::from(acc.value));
            overflow[i * n + j] = acc.overflow;
        }
    }
    Ok(GemmOutput {
        values,
        overflow,
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::BfpConfig;

    fn group(e: i32, m: u32, vals: &[i32]) -> BfpGroup {
        BfpGroup::from_parts(
            e,
            m,
            vals.iter().map(|v| *v < 0).collect(),
            vals.iter().map(|v| v.unsigned_abs() as u16).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quantize_examples() {
        let g = quantize_group(&[7.0, -7.0, 3.5, 0.0]).unwrap();
        assert_eq!(g.scale(), f16::ONE);
        assert_eq!(g.q(), &[7, -7, 4, 0]);
        let z = quantize_group(&[0.0; 8]).unwrap();
        assert_eq!(z.scale(), f16::ONE);
        assert!(z.q().iter().all(|&q| q == 0));
        assert!(quantize_group(&[f64::NAN]).is_err());
        assert!(quantize_group(&[1e9]).is_err());
    }

    #[test]
    fn quantize_tensor_layout() {
        let w = Tensor::from_fn(200, 3, |r, c| (r as f64 - 100.0) * (c + 1) as f64 * 0.01);
        let q = quantize_weights(&w, 128).unwrap();
        assert_eq!(q.groups_per_column(), 2);
        assert_eq!(q.column(1)[1].q().len(), 72);
        let d = q.dequantize();
        for r in 0..200 {
            for c in 0..3 {
                let s = q.column(c)[r / 128].scale().to_f64();
                assert!((d.get(r, c) - w.get(r, c)).abs() <= s / 2.0);
            }
        }
        assert!(q.slice(0, 120, 16).is_err());
        assert_eq!(q.slice(0, 128, 32).unwrap().0.len(), 32);
    }

    #[test]
    fn m8w4_example() {
        let a = group(0, 8, &[128, 64, -32, 0]);
        let p = mac_m8w4(&a, &[3, -2, 1, 7], f16::from_f64(0.5)).unwrap();
        assert_eq!(integer_dot_int4(&a, &[3, -2, 1, 7]).unwrap(), 224);
        assert_eq!(p.value.to_f64(), 0.875);
        assert!(!p.overflow);
        let z = mac_m8w4(&a, &[0; 4], f16::ONE).unwrap();
        assert_eq!(z.value.to_f64(), 0.0);
        assert!(mac_m8w4(&a, &[1; 3], f16::ONE).is_err());
        assert!(mac_m8w4(&group(0, 4, &[1]), &[1], f16::ONE).is_err());
    }

    #[test]
    fn m8m4_example() {
        let a = group(0, 8, &[128, 64]);
        let b = group(1, 4, &[8, -4]);
        assert_eq!(integer_dot(&a, &b).unwrap(), 768);
        assert_eq!(mac_m8m4(&a, &b).unwrap().value.to_f64(), 1.5);
        let zero = group(1, 4, &[0, 0]);
        assert_eq!(mac_m8m4(&a, &zero).unwrap().value.to_f64(), 0.0);
        assert!(mac_m8m4(&a, &group(1, 4, &[1])).is_err());
        assert!(mac_m8m4(&a, &group(1, 8, &[1, 1])).is_err());
    }

    #[test]
    fn m8m8_example() {
        let a = group(0, 8, &[100]);
        let b = group(0, 8, &[-51]);
        let halves = split_group(&b).unwrap();
        assert_eq!(integer_dot(&a, &halves.hi).unwrap(), -300);
        assert_eq!(integer_dot(&a, &halves.lo).unwrap(), -300);
        assert_eq!(nibble_dot(&a, &b).unwrap(), -5100);
        let p = mac_m8m8(&a, &b).unwrap();
        assert_eq!(p.value.to_f64(), -5100.0 * 2f64.powi(-14));
    }

    #[test]
    fn saturation_is_flagged_and_sticky() {
        let a = group(15, 8, &[255; 32]);
        let b = group(15, 8, &[-255; 32]);
        let p = mac_m8m8(&a, &b).unwrap();
        assert!(p.overflow);
        assert_eq!(p.value, -f16::MAX);
        let acc = accumulate(&[PartialSum::ZERO, p, PartialSum::ZERO]);
        assert!(acc.overflow);
        assert_eq!(acc.value, -65504.0);
    }

    #[test]
    fn accumulate_examples() {
        let ps = [0.875, 1.5].map(|v| PartialSum {
            value: f16::from_f64(v),
            overflow: false,
        });
        assert_eq!(accumulate(&ps).value, 2.375);
        assert_eq!(accumulate(&[]).value, 0.0);
        assert!(!accumulate(&[]).overflow);
    }

    #[test]
    fn identity_gemm() {
        let cfg = BfpConfig::new(32, 8).unwrap();
        let mut e1 = vec![f16::ZERO; 32];
        e1[0] = f16::ONE;
        let a = crate::numerics::convert_group(&e1, &cfg).unwrap();
        let b = crate::numerics::convert_group(&e1, &cfg).unwrap();
        let out = gemm_bfp(&[vec![&a]], &[vec![&b]]).unwrap();
        assert_eq!(out.values.get(0, 0), 1.0);
        assert_eq!(out.modes.m8m8, 1);
        let short = crate::numerics::convert_group(&e1[..16], &cfg).unwrap();
        assert!(gemm_bfp(&[vec![&a]], &[vec![&short]]).is_err());
        assert!(gemm_bfp(&[vec![&a]], &[vec![&b, &b]]).is_err());
    }

    #[test]
    fn mode_selection() {
        let a8 = group(0, 8, &[1]);
        assert_eq!(
            MacMode::for_groups(&a8, &group(0, 4, &[1])).unwrap(),
            MacMode::M8M4
        );
        assert_eq!(MacMode::for_groups(&a8, &a8).unwrap(), MacMode::M8M8);
        assert!(MacMode::for_groups(&group(0, 4, &[1]), &a8).is_err());
        assert!(mac_bfp(MacMode::M8W4, &a8, &a8).is_err());
    }
}
