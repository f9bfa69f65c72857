//! Toy transformer block run end to end on the emulated hardware.
//!
//! The block is `H = X + Attn(X)`, `out = H + relu(H W1) W2` with no
//! normalization. Every projection is an M8W4 GEMM on per-token BFP
//! activations, attention scores and `P V` use the BFP-BFP modes chosen by
//! the cache precision tags, and softmax runs in FP32. A plain FP64 replica
//! using the same dequantized weights runs alongside as the reference.

use std::cell::RefCell;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataflow::{choose_policy, EmaReport, GemmShape};
use crate::error::{HarmoniaError, Result};
use crate::grouping::{group_tensor, group_vector, GroupAxis};
use crate::kvcache::{mean_bits_per_element, storage_bits_closed, KvCacheStore, KvPolicy};
use crate::numerics::{round_to_half, BfpConfig, BfpGroup, EXPONENT_BITS};
use crate::pe::WEIGHT_GROUP_SIZE;
use crate::pe::{gemm_bfp, gemm_m8w4, quantize_weights, GemmOutput, ModeCounts, QuantWeights};
use crate::smoothing::{
    absorb_scale, apply_offsets, apply_scale_qk, calibrate_scale, compute_online_offsets,
    BlockEval, CalibrationConfig, CalibrationResult, OffsetVector, ScaleVector, DEFAULT_TOP_K,
    OFFSET_WINDOW,
};
use crate::tensor::Tensor;

const CALIBRATION_STREAM: u64 = 1;
const INPUT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingSettings {
    pub top_k: usize,
    pub offline: bool,
    pub online: bool,
    pub calibration: CalibrationConfig,
    pub calibration_samples: usize,
    pub calibration_rows: usize,
}

impl Default for SmoothingSettings {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            offline: true,
            online: true,
            calibration: CalibrationConfig::default(),
            calibration_samples: 2,
            calibration_rows: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierSettings {
    /// K output channels whose projection weights are amplified.
    pub channels: Vec<usize>,
    pub factor: f64,
    /// Scale of a persistent per-channel offset added to every input row,
    /// which gives the amplified K channels a consistent sign.
    pub input_mean: f64,
    /// Divide the matching Q channels by `factor` so that `Q K^T` is
    /// unchanged and the outliers only affect the stored representation.
    pub compensate_query: bool,
}

impl Default for OutlierSettings {
    fn default() -> Self {
        Self {
            channels: vec![3],
            factor: 64.0,
            input_mean: 2.0,
            compensate_query: true,
        }
    }
}

impl OutlierSettings {
    /// Plain zero-mean inputs and no amplified channels.
    pub fn none() -> Self {
        Self {
            channels: Vec::new(),
            factor: 1.0,
            input_mean: 0.0,
            compensate_query: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub decode_steps: usize,
    pub bfp: BfpConfig,
    pub kv: KvPolicy,
    pub weight_group_size: usize,
    pub smoothing: SmoothingSettings,
    pub outliers: OutlierSettings,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 1,
            head_dim: 64,
            ffn_dim: 128,
            seq_len: 128,
            decode_steps: 4,
            bfp: BfpConfig::default(),
            kv: KvPolicy::default(),
            weight_group_size: WEIGHT_GROUP_SIZE,
            smoothing: SmoothingSettings::default(),
            outliers: OutlierSettings::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(HarmoniaError::Config(m));
        self.bfp.validate()?;
        self.kv.validate()?;
        if self.hidden == 0 || self.heads * self.head_dim != self.hidden {
            return cfg_err(format!(
                "hidden {} != {} heads x {}",
                self.hidden, self.heads, self.head_dim
            ));
        }
        if self.bfp.mantissa_bits != 8 {
            return cfg_err("activations must use 8-bit mantissas".into());
        }
        if ![4, 8].contains(&self.kv.m_high) || ![4, 8].contains(&self.kv.m_low) {
            return cfg_err("KV mantissas must be 4 or 8 bits".into());
        }
        if self.kv.group_size != self.bfp.group_size {
            return cfg_err("KV and activation group sizes differ".into());
        }
        let gs = self.bfp.group_size;
        for (name, d) in [
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
        ] {
            if d == 0 || d % gs != 0 {
                return Err(HarmoniaError::layout(format!(
                    "{name} {d} is not a multiple of group size {gs}"
                )));
            }
        }
        if self.weight_group_size == 0 || !self.weight_group_size.is_multiple_of(gs) {
            return cfg_err(format!(
                "weight group size {} is not a multiple of {gs}",
                self.weight_group_size
            ));
        }
        if self.seq_len == 0 {
            return cfg_err("empty sequence".into());
        }
        if self.smoothing.online {
            if self.seq_len < OFFSET_WINDOW {
                return cfg_err(format!(
                    "online smoothing needs at least {OFFSET_WINDOW} prefill rows"
                ));
            }
            if self.smoothing.top_k > self.hidden {
                return cfg_err(format!(
                    "top-{} of {} channels",
                    self.smoothing.top_k, self.hidden
                ));
            }
        }
        if let Some(&c) = self.outliers.channels.iter().find(|&&c| c >= self.hidden) {
            return cfg_err(format!("outlier channel {c} out of range"));
        }
        let o = &self.outliers;
        if !(o.factor.is_finite() && o.factor > 0.0 && o.input_mean.is_finite()) {
            return cfg_err("outlier factor must be positive and finite".into());
        }
        Ok(())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(rows, cols, |_, _| d.sample(rng))
}

/// FP64 weights before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ModelConfig,
    raw: RawWeights,
    wq: QuantWeights,
    wk: QuantWeights,
    wv: QuantWeights,
    wo: QuantWeights,
    w1: QuantWeights,
    w2: QuantWeights,
    /// Dequantized weights for the FP64 reference.
    shadow: RawWeights,
    input_mean: Vec<f64>,
    scale: ScaleVector,
    calibration: Option<CalibrationResult>,
}

/// Draws weights from `cfg.seed`, injects K outliers, learns and absorbs the
/// smoothing scale when offline smoothing is on, then quantizes.
pub fn build_toy_model(cfg: &ModelConfig) -> Result<ToyModel> {
    build_with_scale(cfg, None)
}

/// Like [`build_toy_model`] but absorbs a given scale instead of learning one.
pub fn build_toy_model_with_scale(cfg: &ModelConfig, scale: ScaleVector) -> Result<ToyModel> {
    build_with_scale(cfg, Some(scale))
}

/// Weights with outliers injected, plus the per-channel input mean.
fn draw_weights(cfg: &ModelConfig) -> (RawWeights, Vec<f64>) {
    let c = cfg.hidden;
    let f = cfg.ffn_dim;
    let mut r = rng(cfg.seed, 0);
    let std_c = (1.0 / c as f64).sqrt();
    let mut raw = RawWeights {
        wq: gaussian(c, c, std_c, &mut r),
        wk: gaussian(c, c, std_c, &mut r),
        wv: gaussian(c, c, std_c, &mut r),
        wo: gaussian(c, c, std_c, &mut r),
        w1: gaussian(c, f, std_c, &mut r),
        w2: gaussian(f, c, (1.0 / f as f64).sqrt(), &mut r),
    };
    let input_mean: Vec<f64> = (0..c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            cfg.outliers.input_mean * z
        })
        .collect();
    let factor = cfg.outliers.factor;
    for &ch in &cfg.outliers.channels {
        for i in 0..c {
            raw.wk.set(i, ch, raw.wk.get(i, ch) * factor);
            if cfg.outliers.compensate_query {
                raw.wq.set(i, ch, raw.wq.get(i, ch) / factor);
            }
        }
    }
    (raw, input_mean)
}

fn build_with_scale(cfg: &ModelConfig, fixed: Option<ScaleVector>) -> Result<ToyModel> {
    cfg.validate()?;
    let c = cfg.hidden;
    let (raw, input_mean) = draw_weights(cfg);

    let (scale, calibration) = match fixed {
        Some(s) => {
            if s.len() != c {
                return Err(HarmoniaError::shape(format!(
                    "scale of {} for {c} channels",
                    s.len()
                )));
            }
            (s, None)
        }
        None if cfg.smoothing.offline => {
            let block = FakeQuantBlock::new(cfg, &raw);
            let mut cr = rng(cfg.seed, CALIBRATION_STREAM);
            let samples: Vec<Tensor> = (0..cfg.smoothing.calibration_samples)
                .map(|_| sample_rows(cfg.smoothing.calibration_rows, &input_mean, &mut cr))
                .collect();
            let result = calibrate_scale(&block, &samples, &cfg.smoothing.calibration)?;
            (result.scale.clone(), Some(result))
        }
        None => (ScaleVector::ones(c), None),
    };
    let (wq, wk) = absorb_scale(&raw.wq, &raw.wk, &scale)?;
    let absorbed = RawWeights {
        wq,
        wk,
        ..raw.clone()
    };

    let wgs = cfg.weight_group_size;
    let quant = |w: &Tensor| quantize_weights(w, wgs);
    let (wq, wk, wv) = (
        quant(&absorbed.wq)?,
        quant(&absorbed.wk)?,
        quant(&absorbed.wv)?,
    );
    let (wo, w1, w2) = (
        quant(&absorbed.wo)?,
        quant(&absorbed.w1)?,
        quant(&absorbed.w2)?,
    );
    let shadow = RawWeights {
        wq: wq.dequantize(),
        wk: wk.dequantize(),
        wv: wv.dequantize(),
        wo: wo.dequantize(),
        w1: w1.dequantize(),
        w2: w2.dequantize(),
    };
    Ok(ToyModel {
        cfg: cfg.clone(),
        raw,
        wq,
        wk,
        wv,
        wo,
        w1,
        w2,
        shadow,
        input_mean,
        scale,
        calibration,
    })
}

/// Scale learned on caller-supplied inputs, and the K offsets the first
/// sample would produce under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub result: CalibrationResult,
    pub offsets: OffsetVector,
}

/// Offline calibration of the model drawn from `cfg` on `samples`
/// (each `rows x hidden`). Runs even when offline smoothing is disabled.
pub fn calibrate_on(cfg: &ModelConfig, samples: &[Tensor]) -> Result<Calibration> {
    cfg.validate()?;
    let first = samples.first().ok_or(HarmoniaError::EmptyInput)?;
    for x in samples {
        if x.cols() != cfg.hidden || x.rows() == 0 {
            return Err(HarmoniaError::shape(format!(
                "sample {}x{} for hidden size {}",
                x.rows(),
                x.cols(),
                cfg.hidden
            )));
        }
    }
    let (raw, _) = draw_weights(cfg);
    let block = FakeQuantBlock::new(cfg, &raw);
    let result = calibrate_scale(&block, samples, &cfg.smoothing.calibration)?;
    let (_, wk) = absorb_scale(&raw.wq, &raw.wk, &result.scale)?;
    let window = first.slice_rows(0, first.rows().min(OFFSET_WINDOW));
    let k = window.round_to_half().matmul(&wk)?;
    let offsets = compute_online_offsets(&k, cfg.smoothing.top_k, true)?;
    Ok(Calibration { result, offsets })
}

/// `mean + N(0, 1)` rows, rounded to FP16.
fn sample_rows(rows: usize, mean: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, mean.len(), |_, c| {
        let z: f64 = StandardNormal.sample(rng);
        mean[c] + z
    })
    .round_to_half()
}

impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Weights as drawn, with outliers but before absorption.
    pub fn raw_weights(&self) -> &RawWeights {
        &self.raw
    }

    pub fn shadow_weights(&self) -> &RawWeights {
        &self.shadow
    }

    pub fn quantized_wq(&self) -> &QuantWeights {
        &self.wq
    }

    pub fn quantized_wk(&self) -> &QuantWeights {
        &self.wk
    }

    pub fn scale(&self) -> &ScaleVector {
        &self.scale
    }

    pub fn calibration(&self) -> Option<&CalibrationResult> {
        self.calibration.as_ref()
    }

    /// Deterministic FP16 inputs: the model's channel means plus unit noise.
    pub fn sample_inputs(&self, rows: usize) -> Tensor {
        sample_rows(
            rows,
            &self.input_mean,
            &mut rng(self.cfg.seed, INPUT_STREAM),
        )
    }

    /// Calibration inputs as used by the offline search.
    pub fn calibration_inputs(&self) -> Vec<Tensor> {
        let mut r = rng(self.cfg.seed, CALIBRATION_STREAM);
        (0..self.cfg.smoothing.calibration_samples)
            .map(|_| {
                sample_rows(
                    self.cfg.smoothing.calibration_rows,
                    &self.input_mean,
                    &mut r,
                )
            })
            .collect()
    }

    /// The attention sublayer with fake-quantized activations, as seen by
    /// the calibrator.
    pub fn calibration_block(&self) -> impl BlockEval + '_ {
        FakeQuantBlock::new(&self.cfg, &self.raw)
    }
}

/// Rounds to FP16 then converts each row to BFP groups (ragged last group)
/// and back.
fn fake_quant_rows(x: &Tensor, cfg: &BfpConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.data().len());
    for r in 0..x.rows() {
        let row: Vec<f16> = x.row(r).iter().map(|&v| round_to_half(v)).collect();
        for g in group_vector(&row, cfg)? {
            data.extend(g.dequantize());
        }
    }
    Tensor::new(x.rows(), x.cols(), data)
}

fn softmax_f64(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

/// Causal FP64 attention of one head. `q` rows sit at positions
/// `t0..t0 + q.rows()` against keys `0..k.rows()`.
fn attention_f64(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    t0: usize,
    quant_p: Option<&BfpConfig>,
) -> Result<(Tensor, Tensor)> {
    let d = q.cols() as f64;
    let total = k.rows();
    let mut probs = Tensor::zeros(q.rows(), total);
    for i in 0..q.rows() {
        let p = t0 + i;
        let scores: Vec<f64> = (0..=p)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / d.sqrt()
            })
            .collect();
        probs.row_mut(i)[..=p].copy_from_slice(&softmax_f64(&scores));
    }
    if let Some(cfg) = quant_p {
        probs = fake_quant_rows(&probs, cfg)?;
    }
    let ctx = probs.matmul(v)?;
    Ok((probs, ctx))
}

/// Fake-quantizes K token by token with the precision the cache policy
/// would give each token of a `k.rows()`-token sequence.
fn fake_quant_k(k: &Tensor, policy: &KvPolicy) -> Result<Tensor> {
    let total = k.rows();
    let mut data = Vec::with_capacity(k.data().len());
    for t in 0..total {
        let m = if policy.k_is_high(t, total) {
            policy.m_high
        } else {
            policy.m_low
        };
        let row: Vec<f16> = k.row(t).iter().map(|&v| round_to_half(v)).collect();
        for g in group_vector(&row, &BfpConfig::new(policy.group_size, m)?)? {
            data.extend(g.dequantize());
        }
    }
    Tensor::new(total, k.cols(), data)
}

/// Same for V, grouped along tokens with block-granular precision.
fn fake_quant_v(v: &Tensor, policy: &KvPolicy) -> Result<Tensor> {
    let total = v.rows();
    let gs = policy.group_size;
    let full = total / gs;
    let mut out = Tensor::zeros(total, v.cols());
    for c in 0..v.cols() {
        let column: Vec<f16> = (0..total).map(|t| round_to_half(v.get(t, c))).collect();
        for (b, chunk) in column.chunks(gs).enumerate() {
            let m = if b == full {
                policy.residual_bits()
            } else if policy.v_block_is_high(b, full) {
                policy.m_high
            } else {
                policy.m_low
            };
            let g = crate::numerics::convert_group(chunk, &BfpConfig::new(gs, m)?)?;
            for (j, val) in g.dequantize().into_iter().enumerate() {
                out.set(b * gs + j, c, val);
            }
        }
    }
    Ok(out)
}

/// `X Wq`, `X Wk`, `X Wv` for one calibration input; these do not depend on S.
struct Projections {
    x: Tensor,
    convert: bool,
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

struct FakeQuantBlock<'a> {
    cfg: &'a ModelConfig,
    weights: &'a RawWeights,
    memo: RefCell<Vec<Projections>>,
}

impl<'a> FakeQuantBlock<'a> {
    fn new(cfg: &'a ModelConfig, weights: &'a RawWeights) -> Self {
        Self {
            cfg,
            weights,
            memo: RefCell::new(Vec::new()),
        }
    }

    fn projections(&self, x: &Tensor, convert: bool) -> Result<(Tensor, Tensor, Tensor)> {
        if let Some(p) = self
            .memo
            .borrow()
            .iter()
            .find(|p| p.convert == convert && &p.x == x)
        {
            return Ok((p.q.clone(), p.k.clone(), p.v.clone()));
        }
        let w = self.weights;
        let xin = if convert {
            fake_quant_rows(x, &self.cfg.bfp)?
        } else {
            x.clone()
        };
        let p = Projections {
            x: x.clone(),
            convert,
            q: xin.matmul(&w.wq)?,
            k: xin.matmul(&w.wk)?,
            v: xin.matmul(&w.wv)?,
        };
        let out = (p.q.clone(), p.k.clone(), p.v.clone());
        self.memo.borrow_mut().push(p);
        Ok(out)
    }
}

impl BlockEval for FakeQuantBlock<'_> {
    fn channels(&self) -> usize {
        self.cfg.hidden
    }

    /// Attention sublayer output. With `convert`, activations are
    /// fake-quantized the way the emulated path stores them, including the
    /// cache precision policy and online offsets.
    fn eval(&self, x: &Tensor, convert: bool, scale: &ScaleVector) -> Result<Tensor> {
        let cfg = self.cfg;
        let high = cfg.bfp;
        let (q, k, v) = self.projections(x, convert)?;
        let (q, k) = apply_scale_qk(&q, &k, scale)?;
        let (q, k, v) = if convert {
            let k = if cfg.smoothing.online {
                let window = k.slice_rows(0, k.rows().min(OFFSET_WINDOW));
                apply_offsets(
                    &k,
                    &compute_online_offsets(&window, cfg.smoothing.top_k, true)?,
                )?
            } else {
                k
            };
            (
                fake_quant_rows(&q, &high)?,
                fake_quant_k(&k, &cfg.kv)?,
                fake_quant_v(&v, &cfg.kv)?,
            )
        } else {
            (q, k, v)
        };
        let d = cfg.head_dim;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = |t: &Tensor| t.slice_cols(h * d, (h + 1) * d);
            let p_cfg = convert.then_some(&high);
            heads.push(attention_f64(&cols(&q), &cols(&k), &cols(&v), 0, p_cfg)?.1);
        }
        let ctx = Tensor::hcat(&heads)?;
        let ctx = if convert {
            fake_quant_rows(&ctx, &high)?
        } else {
            ctx
        };
        ctx.matmul(&self.weights.wo)
    }
}

/// Error of one stage against the FP64 reference.
///
/// `max_rel` is the normwise relative error `max|e| / max|ref|` over the
/// whole tensor and `mean_rel` the mean of `|e| / max|ref|`. `max_row_rel`
/// normalizes each element by the max magnitude of its own reference row
/// instead, which is stricter for rows of small magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_row_rel: f64,
    pub frobenius_rel: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den.max(f64::MIN_POSITIVE)
    }
}

impl StageError {
    pub fn between(stage: &str, reference: &Tensor, approx: &Tensor) -> StageError {
        let scale = reference.max_abs();
        let mut max_abs = 0.0f64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut max_row_rel = 0.0f64;
        for r in 0..reference.rows() {
            let row_scale = reference.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in reference.row(r).iter().zip(approx.row(r)) {
                let diff = (a - b).abs();
                max_abs = max_abs.max(diff);
                sum += diff;
                sq += diff * diff;
                max_row_rel = max_row_rel.max(ratio(diff, row_scale));
            }
        }
        let n = reference.data().len().max(1) as f64;
        StageError {
            stage: stage.to_string(),
            max_rel: ratio(max_abs, scale),
            mean_rel: ratio(sum / n, scale),
            max_row_rel,
            frobenius_rel: ratio(sq.sqrt(), reference.frobenius()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEma {
    pub gemm: String,
    pub report: EmaReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaSummary {
    pub gemms: Vec<NamedEma>,
    pub elements_a: u64,
    pub elements_b: u64,
    pub total_bits: f64,
    pub energy_pj: f64,
}

impl EmaSummary {
    fn add(&mut self, name: &str, report: EmaReport) {
        self.elements_a += report.elements_a;
        self.elements_b += report.elements_b;
        self.total_bits += report.total_bits;
        self.energy_pj += report.energy_pj;
        self.gemms.push(NamedEma {
            gemm: name.to_string(),
            report,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Cached tokens after the step.
    pub tokens: usize,
    pub new_rows: usize,
    pub errors: Vec<StageError>,
    /// KL(reference || emulated) of attention probabilities per query row,
    /// averaged over heads.
    pub kl_per_row: Vec<f64>,
    /// Largest |sum(p) - 1| over emulated probability rows.
    pub max_row_sum_deviation: f64,
    pub kv_storage_bits: u64,
    pub ema: EmaSummary,
    pub overflow_count: usize,
    pub modes: ModeCounts,
}

impl StepReport {
    pub fn error(&self, stage: &str) -> Option<&StageError> {
        self.errors.iter().find(|e| e.stage == stage)
    }

    pub fn is_finite(&self) -> bool {
        self.errors.iter().all(|e| {
            [e.max_rel, e.mean_rel, e.max_row_rel, e.frobenius_rel]
                .iter()
                .all(|v| v.is_finite())
        }) && self.kl_per_row.iter().all(|v| v.is_finite())
            && self.ema.total_bits.is_finite()
            && self.ema.energy_pj.is_finite()
    }
}

/// Result of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub output: Tensor,
    pub shadow_output: Tensor,
    pub attention: Tensor,
    pub shadow_attention: Tensor,
    /// Emulated FP32 probabilities per head, `new_rows x tokens`.
    pub probs: Vec<Tensor>,
    pub shadow_probs: Vec<Tensor>,
    pub report: StepReport,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn rounded_half(t: &Tensor, what: &str) -> Result<Tensor> {
    let r = t.round_to_half();
    if !r.is_finite() {
        return Err(HarmoniaError::InvalidValue(format!(
            "{what} overflows FP16"
        )));
    }
    Ok(r)
}

fn half_row(t: &Tensor, r: usize, cols: std::ops::Range<usize>) -> Vec<f16> {
    t.row(r)[cols].iter().map(|&v| round_to_half(v)).collect()
}

#[derive(Default)]
struct StepStats {
    ema: EmaSummary,
    overflow: usize,
    modes: ModeCounts,
}

impl StepStats {
    fn record(
        &mut self,
        name: &str,
        out: &GemmOutput,
        shape: (usize, usize, usize),
        bits: (f64, f64),
    ) -> Result<()> {
        self.overflow += out.overflow_count();
        self.modes.m8w4 += out.modes.m8w4;
        self.modes.m8m4 += out.modes.m8m4;
        self.modes.m8m8 += out.modes.m8m8;
        let (m, k, n) = (shape.0 as u64, shape.1 as u64, shape.2 as u64);
        let s = GemmShape::new(m, k, n, gcd(m, 16), gcd(n, 16))?.with_bits(bits.0, bits.1);
        self.ema.add(name, choose_policy(&s)?);
        Ok(())
    }
}

/// Per-run state: one KV cache per head plus the FP64 replica's K and V.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m ToyModel,
    caches: Vec<KvCacheStore>,
    offsets: Option<OffsetVector>,
    shadow_offsets: Option<OffsetVector>,
    shadow_k: Tensor,
    shadow_v: Tensor,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m ToyModel) -> Result<Self> {
        let cfg = &model.cfg;
        let caches = (0..cfg.heads)
            .map(|_| KvCacheStore::new(cfg.head_dim, cfg.kv))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            caches,
            offsets: None,
            shadow_offsets: None,
            shadow_k: Tensor::zeros(0, cfg.hidden),
            shadow_v: Tensor::zeros(0, cfg.hidden),
        })
    }

    pub fn tokens(&self) -> usize {
        self.shadow_k.rows()
    }

    pub fn caches(&self) -> &[KvCacheStore] {
        &self.caches
    }

    /// Offsets in use by the emulated path, once computed.
    pub fn offsets(&self) -> Option<&OffsetVector> {
        self.offsets.as_ref()
    }

    pub fn storage_bits(&self) -> u64 {
        self.caches.iter().map(KvCacheStore::storage_bits).sum()
    }

    /// Runs the block on `x`, whose rows follow the cached tokens.
    pub fn forward(&mut self, x: &Tensor) -> Result<BlockOutput> {
        let model = self.model;
        let cfg = &model.cfg;
        let (n, c) = x.shape();
        if c != cfg.hidden || n == 0 {
            return Err(HarmoniaError::shape(format!(
                "input {n}x{c} for hidden size {}",
                cfg.hidden
            )));
        }
        let t0 = self.tokens();
        let total = t0 + n;
        let d = cfg.head_dim;
        let gs = cfg.bfp.group_size;
        let act_bits = f64::from(1 + cfg.bfp.mantissa_bits) + f64::from(EXPONENT_BITS) / gs as f64;
        let w_bits = model.wq.bits_per_element();
        let mut stats = StepStats::default();

        let x = rounded_half(x, "input")?;
        let m8w4 =
            |name: &str, a: &Tensor, w: &QuantWeights, stats: &mut StepStats| -> Result<Tensor> {
                let ab = group_tensor(a, GroupAxis::PerToken, &cfg.bfp)?;
                let out = gemm_m8w4(&ab, w)?;
                stats.record(
                    name,
                    &out,
                    (a.rows(), w.in_dim(), w.out_dim()),
                    (act_bits, w_bits),
                )?;
                rounded_half(&out.values, name)
            };
        let q = m8w4("q_proj", &x, &model.wq, &mut stats)?;
        let mut k = m8w4("k_proj", &x, &model.wk, &mut stats)?;
        let v = m8w4("v_proj", &x, &model.wv, &mut stats)?;
        let sh = &model.shadow;
        let sq = x.matmul(&sh.wq)?;
        let mut sk = x.matmul(&sh.wk)?;
        let sv = x.matmul(&sh.wv)?;

        if cfg.smoothing.online {
            if self.offsets.is_none() {
                if t0 != 0 || n < OFFSET_WINDOW {
                    return Err(HarmoniaError::shape(format!(
                        "online smoothing needs a first pass of at least {OFFSET_WINDOW} rows"
                    )));
                }
                let top_k = cfg.smoothing.top_k;
                self.offsets = Some(compute_online_offsets(
                    &k.slice_rows(0, OFFSET_WINDOW),
                    top_k,
                    false,
                )?);
                self.shadow_offsets = Some(compute_online_offsets(
                    &sk.slice_rows(0, OFFSET_WINDOW),
                    top_k,
                    false,
                )?);
            }
            k = rounded_half(
                &apply_offsets(&k, self.offsets.as_ref().expect("set above"))?,
                "K",
            )?;
            sk = apply_offsets(&sk, self.shadow_offsets.as_ref().expect("set above"))?;
        }

        for r in 0..n {
            for (h, cache) in self.caches.iter_mut().enumerate() {
                cache.append_kv(
                    &half_row(&k, r, h * d..(h + 1) * d),
                    &half_row(&v, r, h * d..(h + 1) * d),
                )?;
            }
        }
        self.shadow_k.vcat(&sk)?;
        self.shadow_v.vcat(&sv)?;

        let kv_bits = {
            let r = mean_bits_per_element(total, &cfg.kv);
            *r.numer() as f64 / *r.denom() as f64
        };
        let score_scale = (1.0 / (d as f64).sqrt()) as f32;
        let mut ctx_parts = Vec::with_capacity(cfg.heads);
        let mut shadow_ctx_parts = Vec::with_capacity(cfg.heads);
        let mut probs_all = Vec::with_capacity(cfg.heads);
        let mut shadow_probs_all = Vec::with_capacity(cfg.heads);
        let mut kl = vec![0.0; n];
        let mut max_dev = 0.0f64;

        for (h, cache) in self.caches.iter().enumerate() {
            let tags = cache.k_tags();
            let groups_per_row = d.div_ceil(gs) as u64;
            let mut probs = Tensor::zeros(n, total);
            for i in 0..n {
                let p = t0 + i;
                let qg = group_vector(&half_row(&q, i, h * d..(h + 1) * d), &cfg.bfp)?;
                let keys: Vec<Vec<&BfpGroup>> =
                    (0..=p).map(|j| cache.k_row(j).iter().collect()).collect();
                let out = gemm_bfp(&[qg.iter().collect()], &keys)?;
                let high = tags[..=p].iter().filter(|&&m| m == 8).count() as u64;
                check_modes(
                    "scores",
                    &out.modes,
                    high * groups_per_row,
                    (p as u64 + 1 - high) * groups_per_row,
                )?;
                stats.record("scores", &out, (1, d, p + 1), (act_bits, kv_bits))?;

                let scores: Vec<f32> = out
                    .values
                    .row(0)
                    .iter()
                    .map(|&s| s as f32 * score_scale)
                    .collect();
                let row = softmax_f32(&scores);
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                max_dev = max_dev.max((sum - 1.0).abs());
                for (j, &pj) in row.iter().enumerate() {
                    probs.set(i, j, f64::from(pj));
                }
            }
            if max_dev > 1e-6 {
                return Err(HarmoniaError::Invariant(format!(
                    "attention row sums deviate from 1 by {max_dev:e}"
                )));
            }

            let p_groups = (0..n)
                .map(|i| group_vector(&half_row(&probs, i, 0..total), &cfg.bfp))
                .collect::<Result<Vec<_>>>()?;
            let p_rows: Vec<Vec<&BfpGroup>> = p_groups.iter().map(|g| g.iter().collect()).collect();
            let v_cols: Vec<Vec<&BfpGroup>> = (0..d).map(|ch| cache.v_column_groups(ch)).collect();
            let out = gemm_bfp(&p_rows, &v_cols)?;
            let mut v_high = cache.v_block_tags().iter().filter(|&&m| m == 8).count() as u64;
            let mut v_groups = cache.v_block_tags().len() as u64;
            if let Some(g) = cache.v_residual().first() {
                v_groups += 1;
                v_high += u64::from(g.mantissa_bits() == 8);
            }
            let per = (n * d) as u64;
            check_modes(
                "context",
                &out.modes,
                v_high * per,
                (v_groups - v_high) * per,
            )?;
            stats.record("context", &out, (n, total, d), (act_bits, kv_bits))?;
            ctx_parts.push(out.values);

            let cols = |t: &Tensor| t.slice_cols(h * d, (h + 1) * d);
            let (sp, sctx) = attention_f64(
                &cols(&sq),
                &cols(&self.shadow_k),
                &cols(&self.shadow_v),
                t0,
                None,
            )?;
            for (i, klv) in kl.iter_mut().enumerate() {
                *klv += kl_divergence(sp.row(i), probs.row(i)) / cfg.heads as f64;
            }
            shadow_ctx_parts.push(sctx);
            probs_all.push(probs);
            shadow_probs_all.push(sp);
        }

        let ctx = rounded_half(&Tensor::hcat(&ctx_parts)?, "context")?;
        let attn = m8w4("o_proj", &ctx, &model.wo, &mut stats)?;
        let hres = rounded_half(&x.add(&attn)?, "residual")?;
        let f1 = m8w4("ffn_up", &hres, &model.w1, &mut stats)?.map(|v| v.max(0.0));
        let f2 = m8w4("ffn_down", &f1, &model.w2, &mut stats)?;
        let output = rounded_half(&hres.add(&f2)?, "output")?;

        let shadow_attention = Tensor::hcat(&shadow_ctx_parts)?.matmul(&sh.wo)?;
        let sh_res = x.add(&shadow_attention)?;
        let sf = sh_res.matmul(&sh.w1)?.map(|v| v.max(0.0)).matmul(&sh.w2)?;
        let shadow_output = sh_res.add(&sf)?;

        let kv_storage_bits = self.storage_bits();
        let closed = cfg.heads as u64 * storage_bits_closed(total, d, &cfg.kv);
        if kv_storage_bits != closed {
            return Err(HarmoniaError::Invariant(format!(
                "cache holds {kv_storage_bits} bits, closed form gives {closed}"
            )));
        }

        let report = StepReport {
            tokens: total,
            new_rows: n,
            errors: vec![
                StageError::between("attention", &shadow_attention, &attn),
                StageError::between("ffn", &sf, &f2),
                StageError::between("output", &shadow_output, &output),
            ],
            kl_per_row: kl,
            max_row_sum_deviation: max_dev,
            kv_storage_bits,
            ema: stats.ema,
            overflow_count: stats.overflow,
            modes: stats.modes,
        };
        Ok(BlockOutput {
            output,
            shadow_output,
            attention: attn,
            shadow_attention,
            probs: probs_all,
            shadow_probs: shadow_probs_all,
            report,
        })
    }
}

fn check_modes(what: &str, got: &ModeCounts, m8m8: u64, m8m4: u64) -> Result<()> {
    if got.m8m8 != m8m8 || got.m8m4 != m8m4 || got.m8w4 != 0 {
        return Err(HarmoniaError::Invariant(format!(
            "{what}: modes {got:?} disagree with region tags ({m8m8} M8M8, {m8m4} M8M4)"
        )));
    }
    Ok(())
}

/// FP32 softmax; the denominator is accumulated wide and rounded once.
fn softmax_f32(scores: &[f32]) -> Vec<f32> {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum = e.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
    e.iter().map(|v| v / sum).collect()
}

fn kl_divergence(reference: &[f64], approx: &[f64]) -> f64 {
    reference
        .iter()
        .zip(approx)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q.max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Runs the block over a fresh session.
pub fn prefill<'m>(model: &'m ToyModel, x: &Tensor) -> Result<(BlockOutput, Session<'m>)> {
    let mut session = Session::new(model)?;
    let out = session.forward(x)?;
    Ok((out, session))
}

/// One autoregressive step.
pub fn decode_step(session: &mut Session<'_>, x_row: &Tensor) -> Result<BlockOutput> {
    if session.tokens() == 0 {
        return Err(HarmoniaError::shape("decode before prefill"));
    }
    if x_row.rows() != 1 {
        return Err(HarmoniaError::shape(format!(
            "decode takes one row, got {}",
            x_row.rows()
        )));
    }
    session.forward(x_row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ModelConfig,
    pub scale: Vec<f64>,
    pub calibration: Option<CalibrationResult>,
    pub offsets: Vec<f64>,
    pub active_channels: Vec<usize>,
    pub prefill: StepReport,
    pub decode: Vec<StepReport>,
}

impl RunResult {
    /// Frobenius-relative error of the prefill attention output.
    pub fn attention_error(&self) -> f64 {
        self.prefill
            .error("attention")
            .map_or(f64::NAN, |e| e.frobenius_rel)
    }

    /// Worst per-element output error over prefill and decode.
    pub fn max_output_error(&self) -> f64 {
        std::iter::once(&self.prefill)
            .chain(&self.decode)
            .filter_map(|r| r.error("output"))
            .fold(0.0, |m, e| m.max(e.max_rel))
    }

    pub fn final_report(&self) -> &StepReport {
        self.decode.last().unwrap_or(&self.prefill)
    }
}

fn run_model(model: &ToyModel) -> Result<RunResult> {
    let cfg = &model.cfg;
    let x = model.sample_inputs(cfg.seq_len + cfg.decode_steps);
    let (pre, mut session) = prefill(model, &x.slice_rows(0, cfg.seq_len))?;
    let mut decode = Vec::with_capacity(cfg.decode_steps);
    for t in cfg.seq_len..cfg.seq_len + cfg.decode_steps {
        decode.push(decode_step(&mut session, &x.slice_rows(t, t + 1))?.report);
    }
    let offsets = session
        .offsets()
        .cloned()
        .unwrap_or_else(|| OffsetVector::zeros(cfg.hidden));
    Ok(RunResult {
        config: cfg.clone(),
        scale: model.scale.as_slice().to_vec(),
        calibration: model.calibration.clone(),
        offsets: offsets.offsets().to_vec(),
        active_channels: offsets.active_channels().to_vec(),
        prefill: pre.report,
        decode,
    })
}

/// Builds the model and runs prefill followed by `decode_steps` steps.
pub fn run(cfg: &ModelConfig) -> Result<RunResult> {
    run_model(&build_toy_model(cfg)?)
}

/// Same as [`run`] with a fixed smoothing scale.
pub fn run_with_scale(cfg: &ModelConfig, scale: ScaleVector) -> Result<RunResult> {
    run_model(&build_toy_model_with_scale(cfg, scale)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub group_size: usize,
    pub mantissa_bits: u32,
    /// MSE of BFP-converting the reference K activations (token axis).
    pub k_mse: f64,
    /// MSE of BFP-converting the reference V activations (channel axis).
    pub v_mse: f64,
    /// Output error of the full pipeline, for points the hardware can run.
    pub pipeline_max_rel: Option<f64>,
}

fn grouped_mse(x: &Tensor, cfg: &BfpConfig) -> Result<f64> {
    let reference = x.round_to_half();
    let approx = fake_quant_rows(x, cfg)?;
    let n = reference.data().len().max(1) as f64;
    Ok(reference
        .data()
        .iter()
        .zip(approx.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Conversion error over a grid of group sizes and mantissa widths.
///
/// K and V are captured from the FP64 reference of one prefill of `cfg`.
/// Points with 8-bit mantissas and a group size dividing every per-token
/// dimension also get a full pipeline run.
pub fn run_sweep(
    cfg: &ModelConfig,
    group_sizes: &[usize],
    mantissa_bits: &[u32],
) -> Result<Vec<SweepRow>> {
    let model = build_toy_model(cfg)?;
    let x = model.sample_inputs(cfg.seq_len);
    let (_, session) = prefill(&model, &x)?;
    let k = session.shadow_k.clone();
    let vt = session.shadow_v.transpose();
    let mut rows = Vec::new();
    for &gs in group_sizes {
        for &m in mantissa_bits {
            let bfp = BfpConfig::new(gs, m)?;
            let runnable = m == 8
                && [cfg.hidden, cfg.head_dim, cfg.ffn_dim]
                    .iter()
                    .all(|d| d % gs == 0)
                && cfg.weight_group_size.is_multiple_of(gs);
            let pipeline_max_rel = if runnable {
                let point = ModelConfig {
                    bfp,
                    kv: KvPolicy {
                        group_size: gs,
                        ..cfg.kv
                    },
                    ..cfg.clone()
                };
                Some(run(&point)?.max_output_error())
            } else {
                None
            };
            rows.push(SweepRow {
                group_size: gs,
                mantissa_bits: m,
                k_mse: grouped_mse(&k, &bfp)?,
                v_mse: grouped_mse(&vt, &bfp)?,
                pipeline_max_rel,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub asym_alloc: bool,
    pub offline_smooth: bool,
    pub online_smooth: bool,
}

impl AblationToggles {
    pub const ALL: AblationToggles = AblationToggles {
        asym_alloc: true,
        offline_smooth: true,
        online_smooth: true,
    };
    pub const NONE: AblationToggles = AblationToggles {
        asym_alloc: false,
        offline_smooth: false,
        online_smooth: false,
    };

    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        if !self.asym_alloc {
            out.kv.initial_tokens = 0;
            out.kv.local_tokens = 0;
        }
        out.smoothing.offline &= self.offline_smooth;
        out.smoothing.online &= self.online_smooth;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub toggles: AblationToggles,
    pub seed: u64,
    pub attention_error: f64,
    pub output_max_rel: f64,
    pub kv_storage_bits: u64,
    pub result: RunResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub enabled: AblationArm,
    pub naive: AblationArm,
    /// `enabled - naive` attention-output error; negative is better.
    pub attention_error_delta: f64,
}

fn arm(cfg: &ModelConfig, toggles: AblationToggles) -> Result<AblationArm> {
    let result = run(&toggles.apply(cfg))?;
    Ok(AblationArm {
        toggles,
        seed: cfg.seed,
        attention_error: result.attention_error(),
        output_max_rel: result.max_output_error(),
        kv_storage_bits: result.final_report().kv_storage_bits,
        result,
    })
}

/// Paired runs on the same seed: `toggles` against everything off.
pub fn ablation(cfg: &ModelConfig, toggles: AblationToggles) -> Result<AblationReport> {
    let enabled = arm(cfg, toggles)?;
    let naive = arm(cfg, AblationToggles::NONE)?;
    Ok(AblationReport {
        attention_error_delta: enabled.attention_error - naive.attention_error,
        enabled,
        naive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            seq_len: 64,
            decode_steps: 2,
            outliers: OutlierSettings::none(),
            smoothing: SmoothingSettings {
                offline: false,
                online: false,
                ..SmoothingSettings::default()
            },
            kv: KvPolicy {
                m_low: 8,
                ..KvPolicy::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn calibrate_on_external_samples() {
        let mut cfg = ModelConfig::default();
        cfg.smoothing.calibration.iters = 0;
        let x = build_toy_model(&ModelConfig {
            smoothing: SmoothingSettings {
                offline: false,
                ..cfg.smoothing.clone()
            },
            ..cfg.clone()
        })
        .unwrap()
        .sample_inputs(40);
        let c = calibrate_on(&cfg, std::slice::from_ref(&x)).unwrap();
        assert_eq!(c.result.scale, ScaleVector::ones(cfg.hidden));
        assert_eq!(c.offsets.active_channels().len(), cfg.smoothing.top_k);

        cfg.smoothing.calibration.iters = 3;
        let a = calibrate_on(&cfg, std::slice::from_ref(&x)).unwrap();
        assert!(a.result.objective <= a.result.initial_objective);
        assert_eq!(a, calibrate_on(&cfg, std::slice::from_ref(&x)).unwrap());

        assert!(calibrate_on(&cfg, &[]).is_err());
        assert!(calibrate_on(&cfg, &[Tensor::zeros(4, 32)]).is_err());
    }

    #[test]
    fn deterministic_weights() {
        let cfg = small();
        let a = build_toy_model(&cfg).unwrap();
        let b = build_toy_model(&cfg).unwrap();
        assert_eq!(a, b);
        let c = build_toy_model(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.shadow_weights().wq, c.shadow_weights().wq);
    }

    #[test]
    fn ones_scale_leaves_weights_alone() {
        let cfg = small();
        let m = build_toy_model(&cfg).unwrap();
        let raw_q = quantize_weights(&m.raw_weights().wq, cfg.weight_group_size).unwrap();
        assert_eq!(&raw_q, m.quantized_wq());
    }

    #[test]
    fn prefill_small_fidelity() {
        let cfg = small();
        let result = run(&cfg).unwrap();
        assert!(
            result.max_output_error() <= 1.0 / 32.0,
            "{}",
            result.max_output_error()
        );
        assert!(result.prefill.max_row_sum_deviation <= 1e-6);
        assert!(result.prefill.is_finite());
        assert_eq!(result.prefill.modes.m8m4, 0);
    }

    #[test]
    fn decode_storage_tracks_closed_form() {
        let cfg = ModelConfig {
            kv: KvPolicy::default(),
            seq_len: 100,
            decode_steps: 3,
            ..small()
        };
        let result = run(&cfg).unwrap();
        for (i, r) in result.decode.iter().enumerate() {
            assert_eq!(r.tokens, 101 + i);
            assert_eq!(r.kv_storage_bits, storage_bits_closed(101 + i, 64, &cfg.kv));
        }
    }

    #[test]
    fn config_errors() {
        let bad = ModelConfig {
            hidden: 48,
            head_dim: 48,
            ..small()
        };
        assert!(matches!(
            build_toy_model(&bad),
            Err(HarmoniaError::Layout(_))
        ));
        let bad = ModelConfig {
            heads: 2,
            ..small()
        };
        assert!(matches!(
            build_toy_model(&bad),
            Err(HarmoniaError::Config(_))
        ));
        let bad = ModelConfig {
            seq_len: 16,
            smoothing: SmoothingSettings::default(),
            ..small()
        };
        assert!(build_toy_model(&bad).is_err());
    }

    #[test]
    fn online_needs_a_full_window() {
        let cfg = ModelConfig {
            smoothing: SmoothingSettings {
                offline: false,
                ..SmoothingSettings::default()
            },
            ..small()
        };
        let model = build_toy_model(&cfg).unwrap();
        let x = model.sample_inputs(40);
        let mut s = Session::new(&model).unwrap();
        assert!(s.forward(&x.slice_rows(0, 8)).is_err());
        assert!(s.forward(&x).is_ok());
        assert!(s.offsets().is_some());
    }

    #[test]
    fn softmax_rows_normalized() {
        let p = softmax_f32(&[1000.0, -3.0, 2.5, 2.5]);
        let sum: f64 = p.iter().map(|&v| f64::from(v)).sum();
        assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn stage_error_normalizes_by_row() {
        let r = Tensor::from_rows(&[vec![4.0, -1.0], vec![2.0, 0.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![4.0, -1.0], vec![1.0, 0.0]]).unwrap();
        let e = StageError::between("x", &r, &a);
        assert_eq!(e.max_rel, 0.25);
        assert_eq!(e.mean_rel, 0.0625);
        assert_eq!(e.max_row_rel, 0.5);
    }
}
