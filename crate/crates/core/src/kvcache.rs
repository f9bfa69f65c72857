//! Precision-regioned BFP storage for K and V.
//!
//! The first `initial_tokens` and the most recent `local_tokens` keys keep
//! `m_high`-bit mantissas; everything else is demoted to `m_low` by
//! truncation as it leaves the local window. V is grouped along tokens, so
//! its local window is rounded to whole groups: the newest
//! `ceil(local / group_size)` committed blocks plus the residual stay high.

use std::ops::Range;

use half::f16;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{HarmoniaError, Result};
use crate::grouping::{group_vector, IncrementalVState};
use crate::numerics::{BfpConfig, BfpGroup, EXPONENT_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvPolicy {
    pub initial_tokens: usize,
    pub local_tokens: usize,
    pub m_high: u32,
    pub m_low: u32,
    pub group_size: usize,
    pub count_shared_exponent: bool,
}

impl Default for KvPolicy {
    fn default() -> Self {
        Self {
            initial_tokens: 32,
            local_tokens: 64,
            m_high: 8,
            m_low: 4,
            group_size: 32,
            count_shared_exponent: true,
        }
    }
}

impl KvPolicy {
    /// Every token at `m` bits.
    pub fn uniform(m: u32) -> Self {
        Self {
            initial_tokens: 0,
            local_tokens: 0,
            m_high: m,
            m_low: m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        BfpConfig::new(self.group_size, self.m_high)?;
        BfpConfig::new(self.group_size, self.m_low)?;
        if self.m_low > self.m_high {
            return Err(HarmoniaError::Config(format!(
                "m_low {} exceeds m_high {}",
                self.m_low, self.m_high
            )));
        }
        Ok(())
    }

    pub fn high_config(&self) -> BfpConfig {
        BfpConfig {
            group_size: self.group_size,
            mantissa_bits: self.m_high,
        }
    }

    /// Whether key `token` is high precision once `total` tokens are cached.
    pub fn k_is_high(&self, token: usize, total: usize) -> bool {
        token < self.initial_tokens || token + self.local_tokens >= total
    }

    pub fn local_blocks(&self) -> usize {
        self.local_tokens.div_ceil(self.group_size)
    }

    /// Whether committed V block `block` is high precision once
    /// `full_blocks` blocks are committed.
    pub fn v_block_is_high(&self, block: usize, full_blocks: usize) -> bool {
        (block + 1) * self.group_size <= self.initial_tokens
            || block + self.local_blocks() >= full_blocks
    }

    /// Precision of the V residual group.
    pub fn residual_bits(&self) -> u32 {
        if self.local_tokens > 0 {
            self.m_high
        } else {
            self.m_low
        }
    }

    fn group_overhead(&self) -> u64 {
        if self.count_shared_exponent {
            u64::from(EXPONENT_BITS)
        } else {
            0
        }
    }

    fn bits_for(&self, elements: u64, m: u32, groups: u64) -> u64 {
        elements * u64::from(1 + m) + groups * self.group_overhead()
    }

    /// Number of high-precision keys among `total`.
    pub fn k_high_tokens(&self, total: usize) -> usize {
        if total <= self.initial_tokens + self.local_tokens {
            total
        } else {
            self.initial_tokens + self.local_tokens
        }
    }

    /// Number of high-precision committed V blocks among `full_blocks`.
    pub fn v_high_blocks(&self, full_blocks: usize) -> usize {
        let initial = self.initial_tokens / self.group_size;
        if full_blocks <= initial + self.local_blocks() {
            full_blocks
        } else {
            initial + self.local_blocks()
        }
    }
}

/// Closed-form K + V storage for `total` tokens of `channels` channels.
pub fn storage_bits_closed(total: usize, channels: usize, policy: &KvPolicy) -> u64 {
    let gs = policy.group_size;
    let c = channels as u64;
    let t = total as u64;
    let hk = policy.k_high_tokens(total) as u64;
    let groups_per_row = channels.div_ceil(gs) as u64;
    let k_bits = policy.bits_for(hk * c, policy.m_high, hk * groups_per_row)
        + policy.bits_for((t - hk) * c, policy.m_low, (t - hk) * groups_per_row);

    let blocks = total / gs;
    let residual = (total % gs) as u64;
    let hb = policy.v_high_blocks(blocks) as u64;
    let lb = blocks as u64 - hb;
    let g = gs as u64;
    let v_bits = policy.bits_for(hb * g * c, policy.m_high, hb * c)
        + policy.bits_for(lb * g * c, policy.m_low, lb * c)
        + if residual > 0 {
            policy.bits_for(residual * c, policy.residual_bits(), c)
        } else {
            0
        };
    k_bits + v_bits
}

/// Mean stored bits per K/V element (independent of the channel count).
pub fn mean_bits_per_element(total: usize, policy: &KvPolicy) -> Ratio<u64> {
    if total == 0 {
        return Ratio::from_integer(0);
    }
    // per-element cost does not depend on C; one group of channels suffices
    let c = policy.group_size;
    Ratio::new(
        storage_bits_closed(total, c, policy),
        2 * (total * c) as u64,
    )
}

/// Mean bits per K element only: the per-token accounting.
pub fn k_bits_per_element(total: usize, policy: &KvPolicy) -> Ratio<u64> {
    if total == 0 {
        return Ratio::from_integer(0);
    }
    let hk = policy.k_high_tokens(total) as u64;
    let t = total as u64;
    let mantissa = Ratio::new(
        hk * u64::from(1 + policy.m_high) + (t - hk) * u64::from(1 + policy.m_low),
        t,
    );
    mantissa + Ratio::new(policy.group_overhead(), policy.group_size as u64)
}

/// Bits per element when every group uses `m`-bit mantissas.
pub fn uniform_bits_per_element(
    m: u32,
    group_size: usize,
    count_shared_exponent: bool,
) -> Ratio<u64> {
    let exp = if count_shared_exponent {
        u64::from(EXPONENT_BITS)
    } else {
        0
    };
    Ratio::from_integer(u64::from(1 + m)) + Ratio::new(exp, group_size as u64)
}

/// Stored size relative to FP16.
pub fn size_fraction_vs_fp16(bits_per_element: Ratio<u64>) -> Ratio<u64> {
    bits_per_element / 16
}

/// `16 / bits`: how many times smaller than FP16.
pub fn compression_ratio(bits_per_element: Ratio<u64>) -> Ratio<u64> {
    Ratio::from_integer(16) / bits_per_element
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HighPrecisionFraction {
    /// Per-token accounting (K).
    pub k_tokens: Ratio<u64>,
    /// Group-granular accounting (V, including the residual).
    pub v_tokens: Ratio<u64>,
    /// Set when the sequence is shorter than the two windows combined.
    pub all_high: bool,
}

pub fn high_precision_fraction(total: usize, policy: &KvPolicy) -> HighPrecisionFraction {
    let windows = policy.initial_tokens + policy.local_tokens;
    if total == 0 {
        return HighPrecisionFraction {
            k_tokens: Ratio::from_integer(1),
            v_tokens: Ratio::from_integer(1),
            all_high: true,
        };
    }
    let blocks = total / policy.group_size;
    let residual = total % policy.group_size;
    let v_high = policy.v_high_blocks(blocks) * policy.group_size
        + if policy.residual_bits() == policy.m_high {
            residual
        } else {
            0
        };
    HighPrecisionFraction {
        k_tokens: Ratio::new(policy.k_high_tokens(total) as u64, total as u64),
        v_tokens: Ratio::new(v_high as u64, total as u64),
        all_high: total < windows,
    }
}

#[derive(Debug, Clone)]
struct KRow {
    groups: Vec<BfpGroup>,
    mantissa_bits: u32,
    /// FP16 source, kept while the row is high precision.
    original: Option<Vec<f16>>,
}

#[derive(Debug, Clone)]
struct VBlockMeta {
    mantissa_bits: u32,
    /// Row-major FP16 source of the block, kept until demotion.
    original: Option<Vec<f16>>,
}

/// One K token as returned by [`KvCacheStore::read_region`].
#[derive(Debug, Clone, PartialEq)]
pub struct KRegionEntry<'a> {
    pub token: usize,
    pub mantissa_bits: u32,
    pub groups: &'a [BfpGroup],
}

/// One V token block (or the residual) intersecting a read.
#[derive(Debug, Clone, PartialEq)]
pub struct VRegionEntry<'a> {
    pub tokens: Range<usize>,
    pub mantissa_bits: u32,
    /// One group per channel.
    pub groups: Vec<&'a BfpGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionView<'a> {
    pub k: Vec<KRegionEntry<'a>>,
    pub v: Vec<VRegionEntry<'a>>,
}

/// K/V cache of one attention head.
#[derive(Debug, Clone)]
pub struct KvCacheStore {
    policy: KvPolicy,
    channels: usize,
    k_rows: Vec<KRow>,
    v: IncrementalVState,
    v_blocks: Vec<VBlockMeta>,
    v_block_rows: Vec<f16>,
    v_residual: Vec<BfpGroup>,
}

impl KvCacheStore {
    pub fn new(channels: usize, policy: KvPolicy) -> Result<Self> {
        policy.validate()?;
        if channels == 0 || !channels.is_multiple_of(policy.group_size) {
            return Err(HarmoniaError::layout(format!(
                "{channels} channels not a multiple of group size {}",
                policy.group_size
            )));
        }
        Ok(Self {
            policy,
            channels,
            k_rows: Vec::new(),
            v: IncrementalVState::new(channels, policy.high_config())?,
            v_blocks: Vec::new(),
            v_block_rows: Vec::new(),
            v_residual: Vec::new(),
        })
    }

    pub fn policy(&self) -> &KvPolicy {
        &self.policy
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token_count(&self) -> usize {
        self.k_rows.len()
    }

    pub fn v_state(&self) -> &IncrementalVState {
        &self.v
    }

    pub fn k_tags(&self) -> Vec<u32> {
        self.k_rows.iter().map(|r| r.mantissa_bits).collect()
    }

    pub fn v_block_tags(&self) -> Vec<u32> {
        self.v_blocks.iter().map(|b| b.mantissa_bits).collect()
    }

    pub fn k_row(&self, token: usize) -> &[BfpGroup] {
        &self.k_rows[token].groups
    }

    /// V groups along tokens for channel `c`: committed blocks then residual.
    pub fn v_column_groups(&self, c: usize) -> Vec<&BfpGroup> {
        let mut out = self.v.committed().column_groups(c);
        if let Some(g) = self.v_residual.get(c) {
            out.push(g);
        }
        out
    }

    pub fn v_residual(&self) -> &[BfpGroup] {
        &self.v_residual
    }

    /// Appends one token. `k_row` and `v_row` must already carry any
    /// smoothing offsets or scales.
    pub fn append_kv(&mut self, k_row: &[f16], v_row: &[f16]) -> Result<()> {
        if k_row.len() != self.channels || v_row.len() != self.channels {
            return Err(HarmoniaError::shape(format!(
                "rows of {} and {} for {} channels",
                k_row.len(),
                v_row.len(),
                self.channels
            )));
        }
        let p = self.policy;
        let t = self.k_rows.len();
        let total = t + 1;

        let bits = if p.k_is_high(t, total) {
            p.m_high
        } else {
            p.m_low
        };
        let groups = group_vector(k_row, &BfpConfig::new(p.group_size, bits)?)?;
        let keep = bits == p.m_high && p.m_low < p.m_high;
        // V may still fail, so validate it before mutating K
        let commit = self.v.append_token(v_row)?;
        self.k_rows.push(KRow {
            groups,
            mantissa_bits: bits,
            original: keep.then(|| k_row.to_vec()),
        });
        if let Some(leaving) = total.checked_sub(p.local_tokens + 1) {
            if !p.k_is_high(leaving, total) && self.k_rows[leaving].mantissa_bits != p.m_low {
                self.demote_k(leaving)?;
            }
        }

        self.v_block_rows.extend_from_slice(v_row);
        if let Some(block) = commit {
            let original = std::mem::take(&mut self.v_block_rows);
            self.v_blocks.push(VBlockMeta {
                mantissa_bits: p.m_high,
                original: (p.m_low < p.m_high).then_some(original),
            });
            let full = block + 1;
            for b in block.saturating_sub(p.local_blocks())..=block {
                if !p.v_block_is_high(b, full) && self.v_blocks[b].mantissa_bits != p.m_low {
                    self.demote_v(b)?;
                }
            }
        }
        self.refresh_residual()?;
        Ok(())
    }

    fn demote_k(&mut self, token: usize) -> Result<()> {
        let p = self.policy;
        let row = &mut self.k_rows[token];
        let demoted = row
            .groups
            .iter()
            .map(|g| g.truncate_mantissas(p.m_low))
            .collect::<Result<Vec<_>>>()?;
        if let Some(orig) = row.original.take() {
            let direct = group_vector(&orig, &BfpConfig::new(p.group_size, p.m_low)?)?;
            if direct != demoted {
                return Err(HarmoniaError::Invariant(format!(
                    "demoted K token {token} differs from direct conversion"
                )));
            }
        }
        row.groups = demoted;
        row.mantissa_bits = p.m_low;
        Ok(())
    }

    fn demote_v(&mut self, block: usize) -> Result<()> {
        let p = self.policy;
        let c = self.channels;
        let committed = self.v.committed_mut();
        for ch in 0..c {
            let g = committed.group_mut(block * c + ch);
            *g = g.truncate_mantissas(p.m_low)?;
        }
        let meta = &mut self.v_blocks[block];
        if let Some(orig) = meta.original.take() {
            let cfg = BfpConfig::new(p.group_size, p.m_low)?;
            for ch in 0..c {
                let column: Vec<f16> = (0..p.group_size).map(|j| orig[j * c + ch]).collect();
                let direct = crate::numerics::convert_group(&column, &cfg)?;
                if direct != self.v.committed().groups()[block * c + ch] {
                    return Err(HarmoniaError::Invariant(format!(
                        "demoted V block {block} differs from direct conversion"
                    )));
                }
            }
        }
        meta.mantissa_bits = p.m_low;
        Ok(())
    }

    fn refresh_residual(&mut self) -> Result<()> {
        let bits = self.policy.residual_bits();
        self.v_residual = self
            .v
            .residual_view()
            .iter()
            .map(|g| {
                if g.mantissa_bits() == bits {
                    Ok(g.clone())
                } else {
                    g.truncate_mantissas(bits)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Entry-by-entry storage accounting.
    pub fn storage_bits(&self) -> u64 {
        let p = &self.policy;
        let cost = |g: &BfpGroup| p.bits_for(g.len() as u64, g.mantissa_bits(), 1);
        let k: u64 = self.k_rows.iter().flat_map(|r| &r.groups).map(cost).sum();
        let v: u64 = self
            .v
            .committed()
            .groups()
            .iter()
            .chain(&self.v_residual)
            .map(cost)
            .sum();
        k + v
    }

    /// Stored groups and precision tags for `tokens`, without side effects.
    pub fn read_region(&self, tokens: Range<usize>) -> Result<RegionView<'_>> {
        let n = self.token_count();
        if tokens.start > tokens.end || tokens.end > n {
            return Err(HarmoniaError::OutOfRange(format!(
                "tokens {tokens:?} of {n}"
            )));
        }
        let k = tokens
            .clone()
            .map(|t| KRegionEntry {
                token: t,
                mantissa_bits: self.k_rows[t].mantissa_bits,
                groups: &self.k_rows[t].groups,
            })
            .collect();
        let gs = self.policy.group_size;
        let c = self.channels;
        let committed = self.v.committed();
        let mut v = Vec::new();
        if !tokens.is_empty() {
            let first = tokens.start / gs;
            let last = (tokens.end - 1) / gs;
            for b in first..=last {
                if b < self.v_blocks.len() {
                    v.push(VRegionEntry {
                        tokens: b * gs..(b + 1) * gs,
                        mantissa_bits: self.v_blocks[b].mantissa_bits,
                        groups: committed.groups()[b * c..(b + 1) * c].iter().collect(),
                    });
                } else if let Some(first_group) = self.v_residual.first() {
                    v.push(VRegionEntry {
                        tokens: b * gs..n,
                        mantissa_bits: first_group.mantissa_bits(),
                        groups: self.v_residual.iter().collect(),
                    });
                }
            }
        }
        Ok(RegionView { k, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize, c: usize) -> Vec<f16> {
        (0..c)
            .map(|i| f16::from_f64(((t * 7 + i * 3) % 23) as f64 * 0.37 - 4.0))
            .collect()
    }

    fn filled(n: usize, policy: KvPolicy) -> KvCacheStore {
        let mut cache = KvCacheStore::new(32, policy).unwrap();
        for t in 0..n {
            cache.append_kv(&row(t, 32), &row(t + 1000, 32)).unwrap();
        }
        cache
    }

    #[test]
    fn first_token_is_high() {
        let cache = filled(1, KvPolicy::default());
        assert_eq!(cache.k_tags(), vec![8]);
    }

    #[test]
    fn tags_after_200_appends() {
        let cache = filled(200, KvPolicy::default());
        let tags = cache.k_tags();
        for (t, &m) in tags.iter().enumerate() {
            let want = if !(32..136).contains(&t) { 8 } else { 4 };
            assert_eq!(m, want, "token {t}");
        }
        // 6 full blocks: block 0 initial, blocks 4 and 5 local
        assert_eq!(cache.v_block_tags(), vec![8, 4, 4, 4, 8, 8]);
        assert_eq!(
            cache.storage_bits(),
            storage_bits_closed(200, 32, &KvPolicy::default())
        );
    }

    #[test]
    fn storage_headline_numbers() {
        let p = KvPolicy::default();
        assert_eq!(mean_bits_per_element(4096, &p), Ratio::new(21, 4));
        assert_eq!(k_bits_per_element(4096, &p), Ratio::new(21, 4));
        assert_eq!(compression_ratio(Ratio::new(21, 4)), Ratio::new(64, 21));
        assert_eq!(
            size_fraction_vs_fp16(uniform_bits_per_element(4, 32, false)),
            Ratio::new(5, 16)
        );
        assert_eq!(
            size_fraction_vs_fp16(uniform_bits_per_element(8, 32, false)),
            Ratio::new(9, 16)
        );
    }

    #[test]
    fn high_fraction_examples() {
        let p = KvPolicy::default();
        let f = high_precision_fraction(4096, &p);
        assert_eq!(f.k_tokens, Ratio::new(96, 4096));
        assert_eq!(f.v_tokens, Ratio::new(96, 4096));
        assert!(!f.all_high);
        assert_eq!(
            high_precision_fraction(96, &p).k_tokens,
            Ratio::from_integer(1)
        );
        assert!(!high_precision_fraction(96, &p).all_high);
        assert_eq!(high_precision_fraction(192, &p).k_tokens, Ratio::new(1, 2));
        assert!(high_precision_fraction(50, &p).all_high);
    }

    #[test]
    fn read_region_tags() {
        let cache = filled(200, KvPolicy::default());
        let view = cache.read_region(0..32).unwrap();
        assert!(view.k.iter().all(|e| e.mantissa_bits == 8));
        assert_eq!(view.v.len(), 1);
        let view = cache.read_region(130..140).unwrap();
        let tags: Vec<u32> = view.k.iter().map(|e| e.mantissa_bits).collect();
        assert_eq!(tags, [vec![4; 6], vec![8; 4]].concat());
        assert_eq!(cache.read_region(130..140).unwrap(), view);
        let tail = cache.read_region(190..200).unwrap();
        assert_eq!(tail.v.last().unwrap().tokens, 192..200);
        assert!(cache.read_region(0..201).is_err());
    }

    #[test]
    fn shape_and_policy_errors() {
        let mut cache = KvCacheStore::new(32, KvPolicy::default()).unwrap();
        assert!(cache.append_kv(&row(0, 31), &row(0, 32)).is_err());
        assert!(cache.append_kv(&row(0, 32), &row(0, 16)).is_err());
        assert_eq!(cache.token_count(), 0);
        assert!(KvCacheStore::new(40, KvPolicy::default()).is_err());
        let bad = KvPolicy {
            m_low: 9,
            ..KvPolicy::default()
        };
        assert!(KvCacheStore::new(32, bad).is_err());
    }

    #[test]
    fn no_local_window_stores_everything_low() {
        let cache = filled(70, KvPolicy::uniform(4));
        assert!(cache.k_tags().iter().all(|&m| m == 4));
        assert!(cache.v_block_tags().iter().all(|&m| m == 4));
        assert!(cache.v_residual().iter().all(|g| g.mantissa_bits() == 4));
        assert_eq!(
            cache.storage_bits(),
            storage_bits_closed(70, 32, &KvPolicy::uniform(4))
        );
    }
}
