//! Outlier smoothing for K.
//!
//! Offline: a learned per-channel scale `S` multiplies K and divides Q, which
//! leaves `Q K^T` unchanged and can be folded into the projection weights.
//! Online: a per-channel offset, taken from the first 32 prefill keys, is
//! subtracted from every key. Each query row's scores shift by the constant
//! `q . o`, which the softmax cancels.

use serde::{Deserialize, Serialize};

use crate::error::{HarmoniaError, Result};
use crate::numerics::{half_parts, round_to_half};
use crate::tensor::Tensor;

/// Number of prefill keys the online offsets are derived from.
pub const OFFSET_WINDOW: usize = 32;
pub const DEFAULT_TOP_K: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleVector(Vec<f64>);

impl ScaleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((channel, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(HarmoniaError::InvalidScale { channel, value });
        }
        Ok(Self(values))
    }

    pub fn ones(channels: usize) -> Self {
        Self(vec![1.0; channels])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Element-wise product, the scale of two successive absorptions.
    pub fn compose(&self, other: &ScaleVector) -> Result<ScaleVector> {
        if self.len() != other.len() {
            return Err(HarmoniaError::shape("scale vectors differ in length"));
        }
        ScaleVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }
}

impl TryFrom<Vec<f64>> for ScaleVector {
    type Error = HarmoniaError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ScaleVector::new(v)
    }
}

impl From<ScaleVector> for Vec<f64> {
    fn from(s: ScaleVector) -> Self {
        s.0
    }
}

fn check_channels(t: &Tensor, channels: usize, what: &str) -> Result<()> {
    if t.cols() != channels {
        return Err(HarmoniaError::shape(format!(
            "{what} has {} channels, expected {channels}",
            t.cols()
        )));
    }
    Ok(())
}

fn scale_columns(t: &Tensor, factors: impl Fn(usize) -> f64) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c) * factors(c))
}

/// `(Q / S, K * S)` column-wise.
pub fn apply_scale_qk(q: &Tensor, k: &Tensor, s: &ScaleVector) -> Result<(Tensor, Tensor)> {
    check_channels(q, s.len(), "Q")?;
    check_channels(k, s.len(), "K")?;
    let s = s.as_slice();
    Ok((scale_columns(q, |c| 1.0 / s[c]), scale_columns(k, |c| s[c])))
}

/// Folds `S` into the projection weights: output channel `c` of `Wq` is
/// divided by `S_c` and of `Wk` multiplied by `S_c`.
pub fn absorb_scale(wq: &Tensor, wk: &Tensor, s: &ScaleVector) -> Result<(Tensor, Tensor)> {
    apply_scale_qk(wq, wk, s)
}

/// A transformer block as seen by the calibrator.
pub trait BlockEval {
    fn channels(&self) -> usize;

    /// Block output for input `x`. `convert` toggles BFP conversion of the
    /// activations; `scale` is the K smoothing scale.
    fn eval(&self, x: &Tensor, convert: bool, scale: &ScaleVector) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Maximum number of coordinate sweeps.
    pub iters: usize,
    /// Initial step in log2(S).
    pub step: f64,
    /// The search stops once the step is halved below this.
    pub min_step: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            step: 1.0,
            min_step: 1.0 / 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub scale: ScaleVector,
    pub initial_objective: f64,
    pub objective: f64,
    /// Best objective after each sweep.
    pub history: Vec<f64>,
    pub evaluations: usize,
}

/// `sum_x || F(x) - F(Convert_BFP(x); S) ||^2` over the calibration samples.
pub fn calibration_objective(
    block: &dyn BlockEval,
    samples: &[(Tensor, Tensor)],
    scale: &ScaleVector,
) -> Result<f64> {
    let mut total = 0.0;
    for (x, reference) in samples {
        let y = block.eval(x, true, scale)?;
        if y.shape() != reference.shape() {
            return Err(HarmoniaError::shape("block output shape changed"));
        }
        total += y
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Learns `S` by coordinate descent on `log2(S)`, starting from ones.
///
/// Each sweep tries `+step` then `-step` on every channel and keeps a move
/// only if it strictly lowers the objective; a sweep without any accepted
/// move halves the step. The returned scale is never worse than ones.
pub fn calibrate_scale(
    block: &dyn BlockEval,
    calib_x: &[Tensor],
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    let channels = block.channels();
    let ones = ScaleVector::ones(channels);
    let samples = calib_x
        .iter()
        .map(|x| Ok((x.clone(), block.eval(x, false, &ones)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut log_s = vec![0.0f64; channels];
    let mut best = calibration_objective(block, &samples, &ones)?;
    let mut evaluations = 1;
    if !best.is_finite() {
        return Err(HarmoniaError::CalibrationDiverged {
            iterations: 0,
            best: ones.as_slice().to_vec(),
        });
    }
    let initial_objective = best;
    let mut history = Vec::new();
    let mut step = cfg.step;

    for iter in 0..cfg.iters {
        let mut improved = false;
        for c in 0..channels {
            for dir in [step, -step] {
                let mut trial = log_s.clone();
                trial[c] += dir;
                let s = ScaleVector::new(trial.iter().map(|l| l.exp2()).collect())?;
                let obj = calibration_objective(block, &samples, &s)?;
                evaluations += 1;
                if !obj.is_finite() {
                    return Err(HarmoniaError::CalibrationDiverged {
                        iterations: iter,
                        best: log_s.iter().map(|l| l.exp2()).collect(),
                    });
                }
                if obj < best {
                    best = obj;
                    log_s = trial;
                    improved = true;
                    break;
                }
            }
        }
        history.push(best);
        if !improved {
            step /= 2.0;
            if step < cfg.min_step {
                break;
            }
        }
    }

    Ok(CalibrationResult {
        scale: ScaleVector::new(log_s.iter().map(|l| l.exp2()).collect())?,
        initial_objective,
        objective: best,
        history,
        evaluations,
    })
}

/// Per-channel K offsets; zero outside `active_channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    offsets: Vec<f64>,
    /// Active channels in rank order (largest magnitude first).
    active_channels: Vec<usize>,
}

impl OffsetVector {
    pub fn zeros(channels: usize) -> Self {
        Self {
            offsets: vec![0.0; channels],
            active_channels: Vec::new(),
        }
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn active_channels(&self) -> &[usize] {
        &self.active_channels
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Online offsets from the initial key window.
///
/// For each channel the element of largest magnitude (first occurrence on
/// ties) is found; the `k` channels with the largest such magnitude (lower
/// index on ties) get half of that signed element as their offset. The
/// window must hold exactly [`OFFSET_WINDOW`] rows unless `allow_short`.
pub fn compute_online_offsets(
    window: &Tensor,
    k: usize,
    allow_short: bool,
) -> Result<OffsetVector> {
    let (rows, channels) = window.shape();
    if k > channels {
        return Err(HarmoniaError::arg(format!(
            "top-{k} of {channels} channels"
        )));
    }
    let rows_ok = if allow_short {
        (1..=OFFSET_WINDOW).contains(&rows)
    } else {
        rows == OFFSET_WINDOW
    };
    if !rows_ok {
        return Err(HarmoniaError::shape(format!(
            "offset window has {rows} rows, expected {OFFSET_WINDOW}"
        )));
    }
    let peaks: Vec<f64> = (0..channels)
        .map(|c| {
            (0..rows).map(|r| window.get(r, c)).fold(0.0f64, |best, v| {
                if v.abs() > best.abs() {
                    v
                } else {
                    best
                }
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| peaks[b].abs().total_cmp(&peaks[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    let mut offsets = vec![0.0; channels];
    for &c in &order {
        offsets[c] = 0.5 * peaks[c];
    }
    Ok(OffsetVector {
        offsets,
        active_channels: order,
    })
}

/// `K[:, c] - o_c` for every row.
pub fn apply_offsets(k: &Tensor, o: &OffsetVector) -> Result<Tensor> {
    check_channels(k, o.len(), "K")?;
    Ok(Tensor::from_fn(k.rows(), k.cols(), |r, c| {
        k.get(r, c) - o.offsets[c]
    }))
}

/// Mean over per-token groups of (largest - smallest) FP16 exponent among
/// the group's nonzero elements. A measure of how much of a group's dynamic
/// range the shared exponent has to cover.
pub fn mean_exponent_spread(x: &Tensor, group_size: usize) -> Result<f64> {
    if group_size == 0 || !x.cols().is_multiple_of(group_size) {
        return Err(HarmoniaError::layout(
            "channels not a multiple of group size",
        ));
    }
    let mut total = 0.0;
    let mut groups = 0usize;
    for r in 0..x.rows() {
        for chunk in x.row(r).chunks(group_size) {
            let exps = chunk
                .iter()
                .map(|&v| half_parts(round_to_half(v)))
                .collect::<Result<Vec<_>>>()?;
            let nz: Vec<i32> = exps
                .iter()
                .filter(|p| p.significand != 0)
                .map(|p| effective_exponent(p.exponent, p.significand))
                .collect();
            if let (Some(hi), Some(lo)) = (nz.iter().max(), nz.iter().min()) {
                total += f64::from(hi - lo);
            }
            groups += 1;
        }
    }
    Ok(if groups == 0 {
        0.0
    } else {
        total / groups as f64
    })
}

fn effective_exponent(exponent: i32, significand: u32) -> i32 {
    // subnormals: position of the leading bit below 2^-14
    exponent - (10 - (31 - significand.leading_zeros()) as i32).max(0)
}
