//! Temporal alignment, modality fusion, vocabulary reprogramming and the
//! statistics prompt prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{
    multi_head_attention, multi_head_cross_attention, AttentionOptions, AttentionParams, ParamId, ParamStore,
    Tape, Tensor, Var,
};

/// Number of autocorrelation lags in the prompt.
pub const PROMPT_LAGS: usize = 5;
/// Width of the numeric prompt vector: min, max, median, trend, lags.
pub const PROMPT_FEATURES: usize = 4 + PROMPT_LAGS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub p_hist: usize,
    pub w_horizon: usize,
    pub j_ratio: usize,
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j_ratio == 0 || self.p_hist == 0 || self.p_hist % self.j_ratio != 0 {
            return Err(Error::InvalidArgument(format!(
                "history {} is not a positive multiple of j = {}",
                self.p_hist, self.j_ratio
            )));
        }
        if self.w_horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.p_hist / self.j_ratio
    }
}

/// Source frame of every dense row: `t / j`.
pub fn alignment_index(j: usize, p: usize) -> Result<Vec<usize>> {
    if j == 0 || p % j != 0 {
        return Err(Error::InvalidArgument(format!("P = {p} is not divisible by j = {j}")));
    }
    Ok((0..p).map(|t| t / j).collect())
}

/// Replicates each of the `P / j` sparse rows backward over its window.
pub fn temporal_align(tape: &mut Tape, sparse: Var, j: usize, p: usize) -> Result<Var> {
    let idx = alignment_index(j, p)?;
    let rows = tape.dims(sparse).0;
    if rows != p / j {
        return Err(Error::shape("temporal_align", format!("{rows} sparse rows for P = {p}, j = {j}")));
    }
    tape.gather_rows(sparse, &idx)
}

/// Interleaves `M` matrices of shape `P x d` into `(P M) x d`, row
/// `t M + m` holding modality `m` at step `t`.
pub fn stack_modalities(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let m = parts.len();
    if m == 0 {
        return Err(Error::Empty("modality list"));
    }
    let dims = tape.dims(parts[0]);
    if parts.iter().any(|&v| tape.dims(v) != dims) {
        let shapes: Vec<_> = parts.iter().map(|&v| tape.dims(v)).collect();
        return Err(Error::shape("stack_modalities", format!("{shapes:?}")));
    }
    if m == 1 {
        return Ok(parts[0]);
    }
    let p = dims.0;
    let all = tape.concat_rows(parts)?;
    let idx: Vec<usize> = (0..p).flat_map(|t| (0..m).map(move |k| k * p + t)).collect();
    tape.gather_rows(all, &idx)
}

/// Per-step attention of a learnable query row over that step's modality
/// rows; `stacked` is `(P M) x d_m`, `query` is `P x d_m`.
pub fn cross_modality_attend(
    tape: &mut Tape,
    store: &ParamStore,
    stacked: Var,
    query: Var,
    attn: &AttentionParams,
) -> Result<Var> {
    let p = tape.dims(query).0;
    let rows = tape.dims(stacked).0;
    if p == 0 || rows % p != 0 {
        return Err(Error::shape("cross_modality_attend", format!("{rows} stacked rows for {p} steps")));
    }
    let opts = AttentionOptions {
        groups: p,
        ..AttentionOptions::default()
    };
    multi_head_attention(tape, store, query, stacked, attn, &opts)
}

/// Reprogramming into prototypes condensed from a fixed random vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Reprogrammer {
    /// `V x D`, frozen.
    pub vocab: ParamId,
    /// `V x V'`, trainable.
    pub proj: ParamId,
    pub lift: Linear,
    pub attn: AttentionParams,
}

impl Reprogrammer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        prototypes: usize,
        d_m: usize,
        d_model: usize,
        heads: usize,
        vocab_seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut vrng = ChaCha8Rng::seed_from_u64(vocab_seed);
        let data = (0..vocab_size * d_model).map(|_| vrng.sample::<f64, _>(StandardNormal)).collect();
        let vocab = store.add(&format!("{prefix}.vocab"), Tensor::new(vec![vocab_size, d_model], data)?, false)?;
        Ok(Self {
            vocab,
            proj: store.add_weight(&format!("{prefix}.proj"), vocab_size, prototypes, rng)?,
            lift: Linear::register(store, &format!("{prefix}.lift"), d_m, d_model, true, rng)?,
            attn: AttentionParams::register(store, &format!("{prefix}.attn"), d_model, heads, rng)?,
        })
    }

    /// `E' = proj^T E`: `V' x D`. Shared by every sample on a tape.
    pub fn prototypes(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let e = tape.param(store, self.vocab);
        let w = tape.param(store, self.proj);
        let wt = tape.transpose(w);
        tape.matmul(wt, e)
    }

    /// `P x D` reprogrammed sequence.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: Var, prototypes: Var) -> Result<Var> {
        let q = self.lift.forward(tape, store, fused)?;
        multi_head_cross_attention(tape, store, q, prototypes, &self.attn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Upward,
    Downward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub trend: Trend,
    pub top_lags: Vec<usize>,
}

impl PromptStats {
    pub fn compute(seq: &[f64]) -> Result<Self> {
        if seq.len() < 2 {
            return Err(Error::InvalidArgument("prompt statistics need at least 2 steps".into()));
        }
        let mut sorted = seq.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let slope: f64 = seq.windows(2).map(|w| w[1] - w[0]).sum();
        Ok(Self {
            min: sorted[0],
            max: sorted[n - 1],
            median,
            trend: if slope >= 0.0 { Trend::Upward } else { Trend::Downward },
            top_lags: top_lags(&autocorrelation_fft(seq), PROMPT_LAGS),
        })
    }

    /// `[min, max, median, trend, lag_1 / P, ..., lag_5 / P]`.
    pub fn features(&self, p: usize) -> Vec<f64> {
        let mut v = vec![
            self.min,
            self.max,
            self.median,
            if self.trend == Trend::Upward { 1.0 } else { 0.0 },
        ];
        v.extend((0..PROMPT_LAGS).map(|k| self.top_lags.get(k).map_or(0.0, |&l| l as f64 / p as f64)));
        v
    }
}

/// Circular autocorrelation of the zero-meaned sequence, `r[k]` for
/// `k = 0..n`, via FFT.
pub fn autocorrelation_fft(seq: &[f64]) -> Vec<f64> {
    let n = seq.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = seq.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = seq.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Autocorrelation quantised relative to the zero-lag energy, so that
/// rankings are robust to rounding differences between algorithms.
pub fn quantized_correlation(r: &[f64]) -> Vec<i64> {
    let scale = r.first().copied().unwrap_or(0.0).abs();
    r.iter()
        .map(|&v| if scale > 0.0 { (v / scale * 1e9).round() as i64 } else { 0 })
        .collect()
}

/// The `k` lags in `1..n` with the largest autocorrelation; ties go to the
/// smaller lag.
pub fn top_lags(r: &[f64], k: usize) -> Vec<usize> {
    let q = quantized_correlation(r);
    let mut lags: Vec<usize> = (1..r.len()).collect();
    lags.sort_by(|&a, &b| q[b].cmp(&q[a]).then(a.cmp(&b)));
    lags.truncate(k);
    lags
}

/// Learned map from the prompt statistics to `L_prom` rows of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    pub rows: usize,
    pub width: usize,
    pub proj: Linear,
}

impl PromptEncoder {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, rows: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            rows,
            width,
            proj: Linear::register(store, prefix, PROMPT_FEATURES, rows * width, true, rng)?,
        })
    }

    /// `L_prom x D` prefix, or `None` when `L_prom = 0`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stats: &PromptStats, p: usize) -> Result<Option<Var>> {
        if self.rows == 0 {
            return Ok(None);
        }
        let f = tape.constant(Tensor::row(stats.features(p)));
        let y = self.proj.forward(tape, store, f)?;
        Ok(Some(tape.reshape(y, &[self.rows, self.width])?))
    }
}

/// Prefix rows followed by the reprogrammed sequence.
pub fn assemble_llm_input(tape: &mut Tape, prefix: Option<Var>, z: Var) -> Result<Var> {
    match prefix {
        Some(p) => {
            if tape.dims(p).1 != tape.dims(z).1 {
                return Err(Error::shape("assemble_llm_input", format!("{:?} vs {:?}", tape.dims(p), tape.dims(z))));
            }
            tape.concat_rows(&[p, z])
        }
        None => Ok(z),
    }
}
