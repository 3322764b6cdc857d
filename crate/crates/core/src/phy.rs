//! Channel synthesis, DFT codebooks, exhaustive beam search and the
//! gain/accuracy metrics every learned predictor is scored against.
//!
//! All arithmetic here is 64-bit complex. A channel is an `N_r x N_t` matrix
//! per subcarrier; the beam search and the normalized gain operate on the
//! subcarrier-averaged matrix with one analog beam pair shared by all
//! subcarriers.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Transmit/receive ULA pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    /// Element spacing in wavelengths (d / lambda).
    pub spacing_ratio: f64,
    pub carrier_hz: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            n_tx: 16,
            n_rx: 4,
            spacing_ratio: 0.5,
            carrier_hz: 28e9,
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 {
            return Err(Error::InvalidArgument("antenna counts must be >= 1".into()));
        }
        if !(self.spacing_ratio > 0.0) || !(self.carrier_hz > 0.0) {
            return Err(Error::InvalidArgument(
                "spacing ratio and carrier frequency must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    #[serde(with = "complex_pair")]
    pub gain: C64,
    pub delay_s: f64,
    pub aod_rad: f64,
    pub aoa_rad: f64,
}

impl Path {
    fn is_finite(&self) -> bool {
        self.gain.re.is_finite()
            && self.gain.im.is_finite()
            && self.delay_s.is_finite()
            && self.aod_rad.is_finite()
            && self.aoa_rad.is_finite()
    }
}

/// OFDM subcarrier layout centred on the carrier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubcarrierGrid {
    pub k_count: usize,
    pub spacing_hz: f64,
}

impl Default for SubcarrierGrid {
    fn default() -> Self {
        Self {
            k_count: 64,
            spacing_hz: 120e3,
        }
    }
}

impl SubcarrierGrid {
    /// Baseband frequency of the zero-based subcarrier `index`, i.e.
    /// `(k - (K+1)/2) * df` with the one-based `k = index + 1`.
    pub fn frequency(&self, index: usize) -> f64 {
        let k = (index + 1) as f64;
        (k - (self.k_count as f64 + 1.0) / 2.0) * self.spacing_hz
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.k_count).map(|i| self.frequency(i)).collect()
    }
}

/// Dense complex matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
    pub subcarrier_index: Option<usize>,
}

impl ChannelMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
            subcarrier_index: None,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "ChannelMatrix::from_rows",
                format!("{} entries for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data,
            subcarrier_index: None,
        })
    }

    /// `a * b^H` for column vectors `a` (rows) and `b` (cols).
    pub fn outer(a: &[C64], b: &[C64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                m.data[i * b.len() + j] = ai * bj.conj();
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `H f` for a length-`cols` vector.
    pub fn mul_vec(&self, f: &[C64]) -> Vec<C64> {
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(f)
                    .map(|(h, x)| h * x)
                    .sum()
            })
            .collect()
    }
}

/// ULA response `[1, e^{j 2 pi d sin(theta)}, ...]`.
pub fn steering_vector(angle_rad: f64, n_antennas: usize, spacing_ratio: f64) -> Vec<C64> {
    let phase = 2.0 * PI * spacing_ratio * angle_rad.sin();
    (0..n_antennas)
        .map(|i| C64::from_polar(1.0, phase * i as f64))
        .collect()
}

/// Per-path gain matrix `A_l = sqrt(N_t N_r / L) alpha_l a_r(theta_l) a_t(phi_l)^H`.
pub fn path_gain_matrix(path: &Path, cfg: &ArrayConfig, n_paths: usize) -> ChannelMatrix {
    let a_r = steering_vector(path.aoa_rad, cfg.n_rx, cfg.spacing_ratio);
    let a_t = steering_vector(path.aod_rad, cfg.n_tx, cfg.spacing_ratio);
    let scale = ((cfg.n_tx * cfg.n_rx) as f64 / n_paths as f64).sqrt();
    ChannelMatrix::outer(&a_r, &a_t).scaled(path.gain * scale)
}

fn check_paths(paths: &[Path]) -> Result<()> {
    match paths.iter().position(|p| !p.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("path {i}"))),
        None => Ok(()),
    }
}

fn delay_phasor(freq_hz: f64, delay_s: f64) -> C64 {
    C64::from_polar(1.0, -2.0 * PI * freq_hz * delay_s)
}

/// Per-subcarrier channels assembled term by term from the geometric model:
/// every entry sums `sqrt(N_t N_r / L) alpha a_r[i] conj(a_t[j]) e^{-j 2 pi f_k tau}`
/// over the paths. An empty path set yields all-zero matrices.
pub fn synth_channel(
    paths: &[Path],
    grid: &SubcarrierGrid,
    cfg: &ArrayConfig,
) -> Result<Vec<ChannelMatrix>> {
    cfg.validate()?;
    check_paths(paths)?;
    let l = paths.len().max(1) as f64;
    let scale = ((cfg.n_tx * cfg.n_rx) as f64 / l).sqrt();
    let responses: Vec<(Vec<C64>, Vec<C64>)> = paths
        .iter()
        .map(|p| {
            (
                steering_vector(p.aoa_rad, cfg.n_rx, cfg.spacing_ratio),
                steering_vector(p.aod_rad, cfg.n_tx, cfg.spacing_ratio),
            )
        })
        .collect();
    let out = (0..grid.k_count)
        .map(|k| {
            let f = grid.frequency(k);
            let mut h = ChannelMatrix::zeros(cfg.n_rx, cfg.n_tx);
            h.subcarrier_index = Some(k);
            for (p, (a_r, a_t)) in paths.iter().zip(&responses) {
                let coeff = p.gain * scale * delay_phasor(f, p.delay_s);
                for i in 0..cfg.n_rx {
                    for j in 0..cfg.n_tx {
                        h.data[i * cfg.n_tx + j] += coeff * a_r[i] * a_t[j].conj();
                    }
                }
            }
            h
        })
        .collect();
    Ok(out)
}

/// Per-subcarrier channels from precomputed gain matrices:
/// `H(f_k) = sum_l A_l e^{-j 2 pi f_k tau_l}`.
pub fn synth_channel_from_gain_matrices(
    gains: &[(ChannelMatrix, f64)],
    grid: &SubcarrierGrid,
    rows: usize,
    cols: usize,
) -> Result<Vec<ChannelMatrix>> {
    for (a, _) in gains {
        if a.rows != rows || a.cols != cols {
            return Err(Error::shape(
                "synth_channel_from_gain_matrices",
                format!("gain matrix {}x{} vs {rows}x{cols}", a.rows, a.cols),
            ));
        }
    }
    Ok((0..grid.k_count)
        .map(|k| {
            let f = grid.frequency(k);
            let mut h = ChannelMatrix::zeros(rows, cols);
            h.subcarrier_index = Some(k);
            for (a, tau) in gains {
                let ph = delay_phasor(f, *tau);
                for (dst, src) in h.data.iter_mut().zip(&a.data) {
                    *dst += src * ph;
                }
            }
            h
        })
        .collect())
}

/// Entrywise mean over subcarriers.
pub fn avg_channel(channels: &[ChannelMatrix]) -> Result<ChannelMatrix> {
    let first = channels.first().ok_or(Error::Empty("channel list"))?;
    let mut acc = ChannelMatrix::zeros(first.rows, first.cols);
    for h in channels {
        if h.rows != first.rows || h.cols != first.cols {
            return Err(Error::shape(
                "avg_channel",
                format!("{}x{} vs {}x{}", h.rows, h.cols, first.rows, first.cols),
            ));
        }
        for (a, v) in acc.data.iter_mut().zip(&h.data) {
            *a += v;
        }
    }
    let inv = 1.0 / channels.len() as f64;
    acc.data.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Subcarrier-averaged channel computed without materialising every
/// subcarrier: each path's gain matrix is weighted by the mean of its delay
/// phasors over the grid.
pub fn averaged_channel(
    paths: &[Path],
    grid: &SubcarrierGrid,
    cfg: &ArrayConfig,
) -> Result<ChannelMatrix> {
    cfg.validate()?;
    check_paths(paths)?;
    if grid.k_count == 0 {
        return Err(Error::Empty("subcarrier grid"));
    }
    let mut h = ChannelMatrix::zeros(cfg.n_rx, cfg.n_tx);
    let n = paths.len().max(1);
    for p in paths {
        let w: C64 = (0..grid.k_count)
            .map(|k| delay_phasor(grid.frequency(k), p.delay_s))
            .sum::<C64>()
            / grid.k_count as f64;
        let a = path_gain_matrix(p, cfg, n);
        for (dst, src) in h.data.iter_mut().zip(&a.data) {
            *dst += src * w;
        }
    }
    Ok(h)
}

/// Shifts all delays so the earliest path arrives at zero.
pub fn normalize_delays(paths: &[Path]) -> Vec<Path> {
    let min = paths
        .iter()
        .map(|p| p.delay_s)
        .fold(f64::INFINITY, f64::min);
    paths
        .iter()
        .map(|p| Path {
            delay_s: p.delay_s - min,
            ..*p
        })
        .collect()
}

/// Where beam `q` of a `Q`-beam codebook points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamLayout {
    /// Element `n` of beam `q` is `e^{j 2 pi n q / Q} / sqrt(N)`.
    Dft,
    /// Beam `q` is steered to `sin(phi) = 2(q + 0.5)/Q - 1`, tiling the
    /// sine space uniformly from -1 to 1 (half-wavelength spacing).
    #[default]
    SinCentered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub n_antennas: usize,
    pub layout: BeamLayout,
    pub vectors: Vec<Vec<C64>>,
}

impl Codebook {
    pub fn new(layout: BeamLayout, size: usize, n_antennas: usize) -> Result<Self> {
        if size == 0 || n_antennas == 0 {
            return Err(Error::InvalidArgument(
                "codebook size and antenna count must be >= 1".into(),
            ));
        }
        let norm = 1.0 / (n_antennas as f64).sqrt();
        let vectors = (0..size)
            .map(|q| {
                let step = match layout {
                    BeamLayout::Dft => 2.0 * PI * q as f64 / size as f64,
                    BeamLayout::SinCentered => {
                        PI * (2.0 * (q as f64 + 0.5) / size as f64 - 1.0)
                    }
                };
                (0..n_antennas)
                    .map(|n| C64::from_polar(norm, step * n as f64))
                    .collect()
            })
            .collect();
        Ok(Self {
            size,
            n_antennas,
            layout,
            vectors,
        })
    }

    pub fn vector(&self, q: usize) -> &[C64] {
        &self.vectors[q]
    }
}

/// The DFT codebook with `Q` beams over `N` antennas.
pub fn dft_codebook(size: usize, n_antennas: usize) -> Result<Codebook> {
    Codebook::new(BeamLayout::Dft, size, n_antennas)
}

/// Power of every (combiner, precoder) pair plus the exhaustive-search optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamSearch {
    pub p_star: usize,
    pub q_star: usize,
    pub q_rx: usize,
    pub q_tx: usize,
    /// Row-major `q_rx x q_tx` table of `|w(p)^H H f(q)|^2`.
    pub gains: Vec<f64>,
}

impl BeamSearch {
    pub fn gain(&self, p: usize, q: usize) -> f64 {
        self.gains[p * self.q_tx + q]
    }

    /// Transmit-beam powers under combiner `p`.
    pub fn tx_row(&self, p: usize) -> &[f64] {
        &self.gains[p * self.q_tx..(p + 1) * self.q_tx]
    }

    pub fn optimal_tx_row(&self) -> &[f64] {
        self.tx_row(self.p_star)
    }
}

/// Exhaustive search over all combiner/precoder pairs. Ties go to the
/// smallest combiner index, then the smallest precoder index.
pub fn optimal_beam_pair(
    h: &ChannelMatrix,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<BeamSearch> {
    if h.cols != tx_cb.n_antennas || h.rows != rx_cb.n_antennas {
        return Err(Error::shape(
            "optimal_beam_pair",
            format!(
                "channel {}x{} vs rx {} / tx {} antennas",
                h.rows, h.cols, rx_cb.n_antennas, tx_cb.n_antennas
            ),
        ));
    }
    // H F, one column per precoder.
    let hf: Vec<Vec<C64>> = tx_cb.vectors.iter().map(|f| h.mul_vec(f)).collect();
    let mut gains = Vec::with_capacity(rx_cb.size * tx_cb.size);
    let (mut best, mut p_star, mut q_star) = (f64::NEG_INFINITY, 0, 0);
    for (p, w) in rx_cb.vectors.iter().enumerate() {
        for (q, col) in hf.iter().enumerate() {
            let y: C64 = w.iter().zip(col).map(|(wi, ci)| wi.conj() * ci).sum();
            let g = y.norm_sqr();
            if g > best {
                best = g;
                p_star = p;
                q_star = q;
            }
            gains.push(g);
        }
    }
    Ok(BeamSearch {
        p_star,
        q_star,
        q_rx: rx_cb.size,
        q_tx: tx_cb.size,
        gains,
    })
}

/// `|w(p)^H H f(q)|^2`.
pub fn beam_power(h: &ChannelMatrix, w: &[C64], f: &[C64]) -> f64 {
    let hf = h.mul_vec(f);
    w.iter()
        .zip(&hf)
        .map(|(wi, x)| wi.conj() * x)
        .sum::<C64>()
        .norm_sqr()
}

/// Ratio of the predicted beam's power to the optimal beam's power under the
/// optimal combiner. A dead channel (zero optimal power) scores 1.
pub fn normalized_gain(
    h: &ChannelMatrix,
    q_hat: usize,
    p_star: usize,
    q_star: usize,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<f64> {
    for (idx, size) in [(q_hat, tx_cb.size), (q_star, tx_cb.size), (p_star, rx_cb.size)] {
        if idx >= size {
            return Err(Error::OutOfRange { index: idx, size });
        }
    }
    if q_hat == q_star {
        return Ok(1.0);
    }
    let w = rx_cb.vector(p_star);
    let den = beam_power(h, w, tx_cb.vector(q_star));
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(beam_power(h, w, tx_cb.vector(q_hat)) / den)
}

/// Normalized gain read off a stored transmit-power row (optimal combiner).
pub fn normalized_gain_from_row(row: &[f64], q_hat: usize, q_star: usize) -> f64 {
    if q_hat == q_star {
        return 1.0;
    }
    let den = row[q_star];
    if den == 0.0 {
        1.0
    } else {
        row[q_hat] / den
    }
}

/// Indices of the `k` strongest beams; equal powers rank the smaller index first.
pub fn top_k_beams(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-step Top-k accuracy. `predictions[i][m]` is sample `i`'s beam for
/// step `m`; `rows[i][m]` the transmit-power row under the optimal combiner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKAccuracy {
    pub ks: Vec<usize>,
    /// `acc[k_idx][m]`.
    pub acc: Vec<Vec<f64>>,
}

impl TopKAccuracy {
    pub fn at(&self, k: usize) -> Option<&[f64]> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| self.acc[i].as_slice())
    }
}

pub fn topk_accuracy(
    predictions: &[Vec<usize>],
    rows: &[Vec<Vec<f64>>],
    ks: &[usize],
) -> Result<TopKAccuracy> {
    if predictions.len() != rows.len() {
        return Err(Error::shape(
            "topk_accuracy",
            format!("{} predictions vs {} gain sets", predictions.len(), rows.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    let w = predictions[0].len();
    let mut hits = vec![vec![0usize; w]; ks.len()];
    for (pred, steps) in predictions.iter().zip(rows) {
        if pred.len() != w || steps.len() != w {
            return Err(Error::shape("topk_accuracy", "ragged horizon".to_string()));
        }
        for (m, (&q_hat, row)) in pred.iter().zip(steps).enumerate() {
            for (ki, &k) in ks.iter().enumerate() {
                if top_k_beams(row, k).contains(&q_hat) {
                    hits[ki][m] += 1;
                }
            }
        }
    }
    let n = predictions.len() as f64;
    Ok(TopKAccuracy {
        ks: ks.to_vec(),
        acc: hits
            .into_iter()
            .map(|h| h.into_iter().map(|c| c as f64 / n).collect())
            .collect(),
    })
}

/// Serde helper writing complex numbers as `[re, im]`.
pub mod complex_pair {
    use super::C64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(c: &C64, s: S) -> Result<S::Ok, S::Error> {
        [c.re, c.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<C64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(C64::new(re, im))
    }
}
