//! Tensor-to-group layouts, incremental V grouping and streaming conversion.
//!
//! Activations are grouped per token (a group spans `group_size` consecutive
//! channels of one token) except V, which is grouped per channel (a group
//! spans consecutive tokens of one channel). Per-channel tensors keep the
//! trailing `T mod group_size` tokens in a residual group per channel.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{HarmoniaError, Result};
use crate::numerics::{
    align_to_exponent, convert_group, half_parts, to_half_checked, BfpConfig, BfpGroup,
    MIN_EXPONENT,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    PerToken,
    PerChannel,
}

/// A `tokens x channels` tensor stored as BFP groups.
///
/// Group addressing is row-major over `(token, channel_block)` for
/// [`GroupAxis::PerToken`] and over `(token_block, channel)` for
/// [`GroupAxis::PerChannel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BfpTensor {
    axis: GroupAxis,
    rows: usize,
    cols: usize,
    cfg: BfpConfig,
    groups: Vec<BfpGroup>,
    residual: Vec<BfpGroup>,
}

impl BfpTensor {
    /// Assembles a tensor from already converted groups, checking the layout.
    pub fn from_parts(
        axis: GroupAxis,
        rows: usize,
        cols: usize,
        cfg: BfpConfig,
        groups: Vec<BfpGroup>,
        residual: Vec<BfpGroup>,
    ) -> Result<Self> {
        cfg.validate()?;
        let gs = cfg.group_size;
        let (expected_groups, group_len, residual_len) = match axis {
            GroupAxis::PerToken => {
                if !cols.is_multiple_of(gs) {
                    return Err(HarmoniaError::layout(format!(
                        "{cols} channels not a multiple of group size {gs}"
                    )));
                }
                (rows * (cols / gs), gs, 0)
            }
            GroupAxis::PerChannel => ((rows / gs) * cols, gs, rows % gs),
        };
        if groups.len() != expected_groups {
            return Err(HarmoniaError::layout(format!(
                "expected {expected_groups} groups, found {}",
                groups.len()
            )));
        }
        if groups.iter().any(|g| g.len() != group_len) {
            return Err(HarmoniaError::layout("full group with wrong length"));
        }
        let expected_residual = if residual_len > 0 { cols } else { 0 };
        if residual.len() != expected_residual || residual.iter().any(|g| g.len() != residual_len) {
            return Err(HarmoniaError::layout("residual groups do not match shape"));
        }
        Ok(Self {
            axis,
            rows,
            cols,
            cfg,
            groups,
            residual,
        })
    }

    pub fn axis(&self) -> GroupAxis {
        self.axis
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> &BfpConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[BfpGroup] {
        &self.groups
    }

    pub fn residual(&self) -> &[BfpGroup] {
        &self.residual
    }

    /// Number of trailing tokens held in the residual (per-channel only).
    pub fn residual_len(&self) -> usize {
        self.residual.first().map_or(0, BfpGroup::len)
    }

    /// Number of full token blocks (per-channel) or channel blocks (per-token).
    pub fn full_blocks(&self) -> usize {
        match self.axis {
            GroupAxis::PerToken => self.cols / self.cfg.group_size,
            GroupAxis::PerChannel => self.rows / self.cfg.group_size,
        }
    }

    /// Mantissa width shared by every group, if uniform.
    pub fn uniform_mantissa_bits(&self) -> Option<u32> {
        let mut it = self
            .groups
            .iter()
            .chain(&self.residual)
            .map(BfpGroup::mantissa_bits);
        let first = it.next()?;
        it.all(|m| m == first).then_some(first)
    }

    /// Groups along the channel axis of token `r` (per-token tensors).
    pub fn row_groups(&self, r: usize) -> Vec<&BfpGroup> {
        debug_assert_eq!(self.axis, GroupAxis::PerToken);
        let per_row = self.cols / self.cfg.group_size;
        self.groups[r * per_row..(r + 1) * per_row].iter().collect()
    }

    /// Groups along the token axis of channel `c`, residual last
    /// (per-channel tensors).
    pub fn column_groups(&self, c: usize) -> Vec<&BfpGroup> {
        debug_assert_eq!(self.axis, GroupAxis::PerChannel);
        let mut out: Vec<&BfpGroup> = (0..self.full_blocks())
            .map(|b| &self.groups[b * self.cols + c])
            .collect();
        if let Some(g) = self.residual.get(c) {
            out.push(g);
        }
        out
    }

    pub(crate) fn group_mut(&mut self, index: usize) -> &mut BfpGroup {
        &mut self.groups[index]
    }

    pub fn dequantize(&self) -> Tensor {
        let gs = self.cfg.group_size;
        let mut out = Tensor::zeros(self.rows, self.cols);
        match self.axis {
            GroupAxis::PerToken => {
                let per_row = self.cols / gs;
                for (i, g) in self.groups.iter().enumerate() {
                    let (r, b) = (i / per_row, i % per_row);
                    for (j, v) in g.dequantize().into_iter().enumerate() {
                        out.set(r, b * gs + j, v);
                    }
                }
            }
            GroupAxis::PerChannel => {
                for (i, g) in self.groups.iter().enumerate() {
                    let (b, c) = (i / self.cols, i % self.cols);
                    for (j, v) in g.dequantize().into_iter().enumerate() {
                        out.set(b * gs + j, c, v);
                    }
                }
                let base = self.full_blocks() * gs;
                for (c, g) in self.residual.iter().enumerate() {
                    for (j, v) in g.dequantize().into_iter().enumerate() {
                        out.set(base + j, c, v);
                    }
                }
            }
        }
        out
    }

    fn push_block(&mut self, groups: Vec<BfpGroup>) {
        debug_assert_eq!(self.axis, GroupAxis::PerChannel);
        debug_assert_eq!(groups.len(), self.cols);
        self.groups.extend(groups);
        self.rows += self.cfg.group_size;
    }
}

/// Groups a real tensor; values are rounded to FP16 first.
pub fn group_tensor(x: &Tensor, axis: GroupAxis, cfg: &BfpConfig) -> Result<BfpTensor> {
    let halves = x
        .data()
        .iter()
        .map(|&v| to_half_checked(v))
        .collect::<Result<Vec<_>>>()?;
    group_halves(x.rows(), x.cols(), &halves, axis, cfg)
}

/// Groups a row-major FP16 buffer of shape `rows x cols`.
pub fn group_halves(
    rows: usize,
    cols: usize,
    data: &[f16],
    axis: GroupAxis,
    cfg: &BfpConfig,
) -> Result<BfpTensor> {
    cfg.validate()?;
    if data.len() != rows * cols {
        return Err(HarmoniaError::shape(format!(
            "{} values for {rows}x{cols}",
            data.len()
        )));
    }
    let gs = cfg.group_size;
    let mut groups = Vec::new();
    let mut residual = Vec::new();
    match axis {
        GroupAxis::PerToken => {
            if !cols.is_multiple_of(gs) {
                return Err(HarmoniaError::layout(format!(
                    "{cols} channels not a multiple of group size {gs}"
                )));
            }
            for chunk in data.chunks(gs) {
                groups.push(convert_group(chunk, cfg)?);
            }
        }
        GroupAxis::PerChannel => {
            let blocks = rows / gs;
            let mut column = Vec::with_capacity(gs);
            for b in 0..blocks {
                for c in 0..cols {
                    column.clear();
                    column.extend((0..gs).map(|j| data[(b * gs + j) * cols + c]));
                    groups.push(convert_group(&column, cfg)?);
                }
            }
            if !rows.is_multiple_of(gs) {
                for c in 0..cols {
                    column.clear();
                    column.extend((blocks * gs..rows).map(|r| data[r * cols + c]));
                    residual.push(convert_group(&column, cfg)?);
                }
            }
        }
    }
    BfpTensor::from_parts(axis, rows, cols, *cfg, groups, residual)
}

/// Splits one vector into consecutive groups, the last possibly short.
pub fn group_vector(values: &[f16], cfg: &BfpConfig) -> Result<Vec<BfpGroup>> {
    if values.is_empty() {
        return Err(HarmoniaError::EmptyInput);
    }
    values
        .chunks(cfg.group_size)
        .map(|c| convert_group(c, cfg))
        .collect()
}

/// Per-channel V storage that grows one token at a time.
///
/// New rows accumulate in a residual buffer whose groups are re-encoded from
/// FP16 on every append. Once `group_size` rows are buffered they are
/// converted once more and committed; committed groups are never
/// re-encoded afterwards.
#[derive(Debug, Clone)]
pub struct IncrementalVState {
    committed: BfpTensor,
    residual_rows: Vec<Vec<f16>>,
    residual_view: Vec<BfpGroup>,
}

impl IncrementalVState {
    pub fn new(channels: usize, cfg: BfpConfig) -> Result<Self> {
        if channels == 0 {
            return Err(HarmoniaError::shape("zero channels"));
        }
        let committed = BfpTensor::from_parts(
            GroupAxis::PerChannel,
            0,
            channels,
            cfg,
            Vec::new(),
            Vec::new(),
        )?;
        Ok(Self {
            committed,
            residual_rows: Vec::new(),
            residual_view: Vec::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.committed.cols
    }

    pub fn config(&self) -> &BfpConfig {
        &self.committed.cfg
    }

    pub fn committed(&self) -> &BfpTensor {
        &self.committed
    }

    pub fn residual_rows(&self) -> &[Vec<f16>] {
        &self.residual_rows
    }

    pub fn residual_view(&self) -> &[BfpGroup] {
        &self.residual_view
    }

    pub fn token_count(&self) -> usize {
        self.committed.rows + self.residual_rows.len()
    }

    /// Appends one V row. Returns the index of the committed block when the
    /// append completes a group.
    pub fn append_token(&mut self, row: &[f16]) -> Result<Option<usize>> {
        let channels = self.channels();
        if row.len() != channels {
            return Err(HarmoniaError::layout(format!(
                "V row has {} channels, expected {channels}",
                row.len()
            )));
        }
        for &v in row {
            half_parts(v)?;
        }
        self.residual_rows.push(row.to_vec());
        let cfg = *self.config();
        let groups = (0..channels)
            .map(|c| {
                let column: Vec<f16> = self.residual_rows.iter().map(|r| r[c]).collect();
                convert_group(&column, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        if self.residual_rows.len() == cfg.group_size {
            let block = self.committed.full_blocks();
            self.committed.push_block(groups);
            self.residual_rows.clear();
            self.residual_view.clear();
            Ok(Some(block))
        } else {
            self.residual_view = groups;
            Ok(None)
        }
    }

    /// Committed blocks plus the residual view for channel `c`.
    pub fn column_groups(&self, c: usize) -> Vec<&BfpGroup> {
        let mut out = self.committed.column_groups(c);
        if let Some(g) = self.residual_view.get(c) {
            out.push(g);
        }
        out
    }

    /// The whole V matrix (committed plus residual) as one tensor.
    pub fn snapshot(&self) -> BfpTensor {
        let mut t = self.committed.clone();
        t.rows += self.residual_rows.len();
        t.residual = self.residual_view.clone();
        t
    }

    pub(crate) fn committed_mut(&mut self) -> &mut BfpTensor {
        &mut self.committed
    }
}

fn exponent_or_min(v: f16) -> Result<i32> {
    let p = half_parts(v)?;
    Ok(if p.significand == 0 {
        MIN_EXPONENT
    } else {
        p.exponent
    })
}

/// Temporally serialized converter: one result per step, a running
/// comparator tracks the maximum exponent, and the aligner runs once
/// `group_size` results have arrived.
#[derive(Debug, Clone)]
pub struct TokenStreamConverter {
    cfg: BfpConfig,
    running_max: i32,
    pending: Vec<f16>,
}

impl TokenStreamConverter {
    pub fn new(cfg: BfpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            running_max: MIN_EXPONENT,
            pending: Vec::with_capacity(cfg.group_size),
        })
    }

    pub fn push(&mut self, value: f16) -> Result<Option<BfpGroup>> {
        self.running_max = self.running_max.max(exponent_or_min(value)?);
        self.pending.push(value);
        if self.pending.len() < self.cfg.group_size {
            return Ok(None);
        }
        self.flush().map(Some)
    }

    /// Converts whatever is pending as a short group.
    pub fn flush(&mut self) -> Result<BfpGroup> {
        if self.pending.is_empty() {
            return Err(HarmoniaError::EmptyInput);
        }
        let g = align_to_exponent(&self.pending, self.running_max, self.cfg.mantissa_bits)?;
        self.pending.clear();
        self.running_max = MIN_EXPONENT;
        Ok(g)
    }
}

/// Streams `values` through the per-token path, one group per
/// `group_size` arrivals. A trailing partial group is an error.
pub fn stream_convert_token_path(
    values: impl IntoIterator<Item = f16>,
    cfg: &BfpConfig,
) -> Result<Vec<BfpGroup>> {
    let mut conv = TokenStreamConverter::new(*cfg)?;
    let mut out = Vec::new();
    for v in values {
        if let Some(g) = conv.push(v)? {
            out.push(g);
        }
    }
    if !conv.pending.is_empty() {
        return Err(HarmoniaError::shape(format!(
            "{} trailing values do not fill a group",
            conv.pending.len()
        )));
    }
    Ok(out)
}

fn comparator_tree(exponents: &[i32]) -> i32 {
    match exponents {
        [] => MIN_EXPONENT,
        [e] => *e,
        _ => {
            let (l, r) = exponents.split_at(exponents.len() / 2);
            comparator_tree(l).max(comparator_tree(r))
        }
    }
}

/// Spatially parallel converter for per-channel (V) groups: each step
/// delivers `lanes` simultaneous results, a comparator tree reduces their
/// exponents, and after `group_size / lanes` steps the group is aligned in
/// `lanes`-wide subgroups.
#[derive(Debug, Clone)]
pub struct ChannelStreamConverter {
    cfg: BfpConfig,
    lanes: usize,
    running_max: i32,
    batches: Vec<Vec<f16>>,
}

impl ChannelStreamConverter {
    pub const DEFAULT_LANES: usize = 8;

    pub fn new(cfg: BfpConfig, lanes: usize) -> Result<Self> {
        cfg.validate()?;
        if lanes == 0 || !cfg.group_size.is_multiple_of(lanes) {
            return Err(HarmoniaError::arg(format!(
                "{lanes} lanes do not divide group size {}",
                cfg.group_size
            )));
        }
        Ok(Self {
            cfg,
            lanes,
            running_max: MIN_EXPONENT,
            batches: Vec::new(),
        })
    }

    pub fn passes(&self) -> usize {
        self.cfg.group_size / self.lanes
    }

    pub fn push_batch(&mut self, batch: &[f16]) -> Result<Option<BfpGroup>> {
        if batch.len() != self.lanes {
            return Err(HarmoniaError::shape(format!(
                "batch of {} results on {} lanes",
                batch.len(),
                self.lanes
            )));
        }
        let exps = batch
            .iter()
            .map(|&v| exponent_or_min(v))
            .collect::<Result<Vec<_>>>()?;
        self.running_max = self.running_max.max(comparator_tree(&exps));
        self.batches.push(batch.to_vec());
        if self.batches.len() < self.passes() {
            return Ok(None);
        }
        let e = self.running_max;
        let m = self.cfg.mantissa_bits;
        let mut negative = Vec::with_capacity(self.cfg.group_size);
        let mut magnitudes = Vec::with_capacity(self.cfg.group_size);
        for sub in &self.batches {
            let g = align_to_exponent(sub, e, m)?;
            negative.extend_from_slice(g.negative());
            magnitudes.extend_from_slice(g.magnitudes());
        }
        self.batches.clear();
        self.running_max = MIN_EXPONENT;
        BfpGroup::from_parts(e, m, negative, magnitudes).map(Some)
    }
}

/// Converts one per-channel group delivered as `group_size / 8` batches.
pub fn stream_convert_channel_path(batches: &[Vec<f16>], cfg: &BfpConfig) -> Result<BfpGroup> {
    let mut conv = ChannelStreamConverter::new(*cfg, ChannelStreamConverter::DEFAULT_LANES)?;
    if batches.len() != conv.passes() {
        return Err(HarmoniaError::shape(format!(
            "{} batches, expected {}",
            batches.len(),
            conv.passes()
        )));
    }
    let mut result = None;
    for b in batches {
        result = conv.push_batch(b)?;
    }
    result.ok_or_else(|| HarmoniaError::Invariant("channel path produced no group".into()))
}
