//! `HBFP` files hold a [`BfpTensor`] bit-exactly.
//!
//! Header (little-endian): magic, version u32, axis u32 (0 per-token,
//! 1 per-channel), group_size u32, m u32, mixed u32, rows u64, cols u64,
//! residual_len u32. Then one record per full group followed by one per
//! residual group: an optional m byte (mixed files only), the biased
//! shared exponent byte, LSB-first sign bits, and magnitudes packed into
//! 4-, 8- or 16-bit containers depending on m.

use harmonia_core::grouping::{BfpTensor, GroupAxis};
use harmonia_core::numerics::{MAX_EXPONENT, MIN_EXPONENT};
use harmonia_core::{BfpConfig, BfpGroup};

use crate::error::{CliError, Result};
use crate::tensor_file::Reader;

pub const MAGIC: &[u8; 4] = b"HBFP";
pub const VERSION: u32 = 1;
const EXPONENT_BIAS: i32 = 15;

fn axis_code(axis: GroupAxis) -> u32 {
    match axis {
        GroupAxis::PerToken => 0,
        GroupAxis::PerChannel => 1,
    }
}

fn container_bits(m: u32) -> u32 {
    match m {
        0..=4 => 4,
        5..=8 => 8,
        _ => 16,
    }
}

fn write_group(out: &mut Vec<u8>, g: &BfpGroup, mixed: bool) {
    if mixed {
        out.push(g.mantissa_bits() as u8);
    }
    out.push((g.shared_exponent() + EXPONENT_BIAS) as u8);
    let mut signs = vec![0u8; g.len().div_ceil(8)];
    for (i, &neg) in g.negative().iter().enumerate() {
        if neg {
            signs[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&signs);
    match container_bits(g.mantissa_bits()) {
        4 => {
            for pair in g.magnitudes().chunks(2) {
                let hi = pair.get(1).copied().unwrap_or(0);
                out.push((pair[0] as u8) | ((hi as u8) << 4));
            }
        }
        8 => out.extend(g.magnitudes().iter().map(|&m| m as u8)),
        _ => g
            .magnitudes()
            .iter()
            .for_each(|m| out.extend_from_slice(&m.to_le_bytes())),
    }
}

fn read_group(r: &mut Reader<'_>, len: usize, header_m: u32, mixed: bool) -> Result<BfpGroup> {
    let m = if mixed { u32::from(r.u8()?) } else { header_m };
    let biased = i32::from(r.u8()?);
    let e = biased - EXPONENT_BIAS;
    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&e) {
        return Err(CliError::format(format!(
            "exponent byte {biased} out of range"
        )));
    }
    let signs = r.take(len.div_ceil(8))?;
    let negative: Vec<bool> = (0..len).map(|i| signs[i / 8] >> (i % 8) & 1 == 1).collect();
    let magnitudes: Vec<u16> = match container_bits(m) {
        4 => {
            let bytes = r.take(len.div_ceil(2))?;
            (0..len)
                .map(|i| u16::from(bytes[i / 2] >> (4 * (i % 2)) & 0xf))
                .collect()
        }
        8 => r.take(len)?.iter().map(|&b| u16::from(b)).collect(),
        _ => r
            .take(2 * len)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect(),
    };
    BfpGroup::from_parts(e, m, negative, magnitudes)
        .map_err(|err| CliError::format(err.to_string()))
}

pub fn to_bytes(t: &BfpTensor) -> Vec<u8> {
    let cfg = t.config();
    let (rows, cols) = t.shape();
    let mixed = t.uniform_mantissa_bits() != Some(cfg.mantissa_bits)
        && !(t.groups().is_empty() && t.residual().is_empty());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        axis_code(t.axis()),
        cfg.group_size as u32,
        cfg.mantissa_bits,
        u32::from(mixed),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&(t.residual_len() as u32).to_le_bytes());
    for g in t.groups().iter().chain(t.residual()) {
        write_group(&mut out, g, mixed);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<BfpTensor> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(CliError::format("bad magic, expected HBFP"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::format(format!("unsupported version {version}")));
    }
    let axis = match r.u32()? {
        0 => GroupAxis::PerToken,
        1 => GroupAxis::PerChannel,
        c => return Err(CliError::format(format!("unknown axis code {c}"))),
    };
    let group_size = r.u32()? as usize;
    let m = r.u32()?;
    let mixed = match r.u32()? {
        0 => false,
        1 => true,
        f => return Err(CliError::format(format!("bad mixed flag {f}"))),
    };
    let cfg = BfpConfig::new(group_size, m).map_err(|e| CliError::format(e.to_string()))?;
    let rows = usize::try_from(r.u64()?).map_err(|_| CliError::format("rows too large"))?;
    let cols = usize::try_from(r.u64()?).map_err(|_| CliError::format("cols too large"))?;
    let residual_len = r.u32()? as usize;

    let (full, residual_groups) = match axis {
        GroupAxis::PerToken => {
            if cols % group_size != 0 || residual_len != 0 {
                return Err(CliError::format("per-token layout with partial groups"));
            }
            (rows * (cols / group_size), 0)
        }
        GroupAxis::PerChannel => {
            if residual_len != rows % group_size {
                return Err(CliError::format(format!(
                    "residual length {residual_len} for {rows} rows"
                )));
            }
            (
                (rows / group_size) * cols,
                if residual_len > 0 { cols } else { 0 },
            )
        }
    };
    // Each record takes at least one byte, which bounds hostile headers.
    if full.saturating_add(residual_groups) > r.remaining() {
        return Err(CliError::format(
            "header claims more groups than the file holds",
        ));
    }
    let groups = (0..full)
        .map(|_| read_group(&mut r, group_size, m, mixed))
        .collect::<Result<Vec<_>>>()?;
    let residual = (0..residual_groups)
        .map(|_| read_group(&mut r, residual_len, m, mixed))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(CliError::format(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    BfpTensor::from_parts(axis, rows, cols, cfg, groups, residual)
        .map_err(|e| CliError::format(e.to_string()))
}
