//! Metrics, baselines, ablations, antenna-count sweeps and attention dumps.

use std::collections::HashMap;
use std::fs;
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::write_pgm;
use crate::model::{samples_for_split, train, ModalitySet, ModelConfig, Network, Sample};
use crate::phy::{normalized_gain_from_row, top_k_beams};
use crate::scene::{splitmix64, Dataset, GenConfig, Split};
use crate::tensor::{Tape, Tensor};

/// Source of beam forecasts.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a Network),
    /// Repeats the last observed beam.
    Persistence,
    /// Uniform beams, one stream per sample.
    Random { seed: u64 },
    /// The true future beams.
    Oracle,
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Model(_) => "model",
            Self::Persistence => "persistence",
            Self::Random { .. } => "random",
            Self::Oracle => "oracle",
        }
    }
}

pub fn persistence_baseline(s: &Sample, w: usize) -> Result<Vec<usize>> {
    let last = *s.q_hist.last().ok_or(Error::Empty("beam history"))?;
    Ok(vec![last; w])
}

/// Beam forecasts for every sample, in order.
pub fn predict_all(pred: Predictor<'_>, samples: &[Sample], q_count: usize) -> Result<Vec<Vec<usize>>> {
    let protos: Option<Tensor> = match pred {
        Predictor::Model(net) => Some(net.prototype_tensor()?),
        _ => None,
    };
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let w = s.q_future.len();
            match pred {
                Predictor::Model(net) => Ok(net.predict_with(protos.as_ref().expect("prototypes"), s)?.q_hat),
                Predictor::Persistence => persistence_baseline(s, w),
                Predictor::Random { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(i as u64)));
                    Ok((0..w).map(|_| rng.gen_range(0..q_count)).collect())
                }
                Predictor::Oracle => Ok(s.q_future.clone()),
            }
        })
        .collect()
}

/// Sum by recursive halving; the result depends only on the input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn pairwise_mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Per-step metrics over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub predictor: String,
    pub samples: usize,
    pub gain: Vec<f64>,
    pub acc1: Vec<f64>,
    pub acc3: Vec<f64>,
    pub avg_gain: f64,
    pub avg_acc1: f64,
    pub avg_acc3: f64,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,gain,acc1,acc3\n");
        for m in 0..self.gain.len() {
            s.push_str(&format!("{},{},{},{}\n", m + 1, self.gain[m], self.acc1[m], self.acc3[m]));
        }
        s
    }

    /// Writes `metrics.csv` and `summary.json` under `dir`.
    pub fn write(&self, dir: &FsPath) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Scores forecasts against the stored oracle gain rows.
pub fn score(name: &str, predictions: &[Vec<usize>], samples: &[Sample]) -> Result<Report> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if predictions.len() != samples.len() {
        return Err(Error::shape("score", format!("{} forecasts for {} samples", predictions.len(), samples.len())));
    }
    let w = samples[0].q_future.len();
    let per: Vec<[Vec<f64>; 3]> = predictions
        .par_iter()
        .zip(samples)
        .map(|(pred, s)| {
            if pred.len() != w || s.q_future.len() != w || s.future_gains.len() != w {
                return Err(Error::shape("score", "ragged horizon"));
            }
            let mut g = Vec::with_capacity(w);
            let mut a1 = Vec::with_capacity(w);
            let mut a3 = Vec::with_capacity(w);
            for m in 0..w {
                let row = &s.future_gains[m];
                let q = pred[m];
                if q >= row.len() {
                    return Err(Error::OutOfRange { index: q, size: row.len() });
                }
                g.push(normalized_gain_from_row(row, q, s.q_future[m]));
                a1.push(f64::from(u8::from(top_k_beams(row, 1).contains(&q))));
                a3.push(f64::from(u8::from(top_k_beams(row, 3).contains(&q))));
            }
            Ok([g, a1, a3])
        })
        .collect::<Result<_>>()?;
    let column = |k: usize, m: usize| -> f64 { pairwise_mean(&per.iter().map(|r| r[k][m]).collect::<Vec<_>>()) };
    let gain: Vec<f64> = (0..w).map(|m| column(0, m)).collect();
    let acc1: Vec<f64> = (0..w).map(|m| column(1, m)).collect();
    let acc3: Vec<f64> = (0..w).map(|m| column(2, m)).collect();
    Ok(Report {
        predictor: name.to_string(),
        samples: samples.len(),
        avg_gain: pairwise_mean(&gain),
        avg_acc1: pairwise_mean(&acc1),
        avg_acc3: pairwise_mean(&acc3),
        gain,
        acc1,
        acc3,
    })
}

pub fn evaluate(pred: Predictor<'_>, samples: &[Sample], q_count: usize) -> Result<Report> {
    let p = predict_all(pred, samples, q_count)?;
    score(pred.name(), &p, samples)
}

/// Data settings stored in a checkpoint so test data can be regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub gen: GenConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modalities: ModalitySet,
    pub bgam: bool,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub avg_gain: f64,
    pub avg_acc1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("modalities,bgam,best_epoch,val_loss,avg_gain,avg_acc1\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.modalities,
            if r.bgam { "on" } else { "off" },
            r.best_epoch,
            r.val_loss,
            r.avg_gain,
            r.avg_acc1
        ));
    }
    s
}

/// Trains and evaluates every (modality set, BGAM) cell on shared data and
/// seed. Cells whose BGAM flag cannot matter reuse the matching run.
pub fn ablate(ds: &Dataset, base: &ModelConfig, modalities: &[ModalitySet], bgam: &[bool]) -> Result<Vec<AblationRow>> {
    if modalities.is_empty() || bgam.is_empty() {
        return Err(Error::Empty("ablation axes"));
    }
    let union = ModelConfig {
        modalities: if modalities.iter().any(|m| m.lidar()) && modalities.iter().any(|m| m.camera()) {
            ModalitySet::All
        } else if modalities.iter().any(|m| m.lidar()) {
            ModalitySet::IndexLidar
        } else if modalities.iter().any(|m| m.camera()) {
            ModalitySet::IndexCamera
        } else {
            ModalitySet::Index
        },
        ..base.clone()
    };
    let tr = samples_for_split(ds, Split::Train, &union)?;
    let va = samples_for_split(ds, Split::Val, &union)?;
    let te = samples_for_split(ds, Split::Test, &union)?;
    let mut done: HashMap<(ModalitySet, bool), AblationRow> = HashMap::new();
    let mut rows = Vec::new();
    for &m in modalities {
        for &b in bgam {
            let key = (m, b && m.lidar());
            let row = match done.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let cfg = ModelConfig {
                        modalities: m,
                        bgam: b,
                        ..base.clone()
                    };
                    log::info!("ablation cell {m} bgam={b}");
                    let mut net = Network::new(cfg)?;
                    let log = train(&mut net, &tr, &va)?;
                    let rep = evaluate(Predictor::Model(&net), &te, base.q_beams)?;
                    let r = AblationRow {
                        modalities: m,
                        bgam: b,
                        best_epoch: log.best_epoch,
                        val_loss: log.best_val_loss,
                        avg_gain: rep.avg_gain,
                        avg_acc1: rep.avg_acc1,
                    };
                    done.insert(key, r.clone());
                    r
                }
            };
            rows.push(AblationRow { bgam: b, ..row });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_t: usize,
    pub model: Report,
    pub random: Report,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_t,samples,avg_gain,avg_acc1,avg_acc3,random_avg_gain\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n_t, r.model.samples, r.model.avg_gain, r.model.avg_acc1, r.model.avg_acc3, r.random.avg_gain
        ));
    }
    s
}

/// Test split regenerated with `n_t` transmit antennas; everything else,
/// including the beam count, is unchanged.
pub fn regenerate_test_split(data: &DataConfig, n_t: usize) -> Result<Dataset> {
    let mut gen = data.gen.clone();
    gen.array.n_tx = n_t;
    gen.splits.train = 0;
    gen.splits.val = 0;
    Dataset::generate(&gen, data.seed)
}

/// Evaluates a trained network on test sets regenerated per antenna count.
pub fn robustness_sweep(net: &Network, data: &DataConfig, n_ts: &[usize], random_seed: u64) -> Result<Vec<SweepRow>> {
    n_ts.iter()
        .map(|&n_t| {
            log::info!("sweep: N_t = {n_t}");
            let ds = regenerate_test_split(data, n_t)?;
            let te = samples_for_split(&ds, Split::Test, &net.config)?;
            Ok(SweepRow {
                n_t,
                model: evaluate(Predictor::Model(net), &te, net.config.q_beams)?,
                random: evaluate(Predictor::Random { seed: random_seed }, &te, net.config.q_beams)?,
            })
        })
        .collect()
}

/// LiDAR pooling weights over the BEV grid for one sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// `weights[head][cell]`.
    pub weights: Vec<Vec<f64>>,
    pub mask: Option<Vec<bool>>,
}

impl AttentionMap {
    pub fn mean_weights(&self) -> Vec<f64> {
        let h = self.weights.len() as f64;
        (0..self.height * self.width)
            .map(|c| self.weights.iter().map(|w| w[c]).sum::<f64>() / h)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col");
        for h in 0..self.weights.len() {
            s.push_str(&format!(",head{h}"));
        }
        s.push_str(",mask\n");
        for r in 0..self.height {
            for c in 0..self.width {
                let i = r * self.width + c;
                s.push_str(&format!("{r},{c}"));
                for w in &self.weights {
                    s.push_str(&format!(",{}", w[i]));
                }
                let m = self.mask.as_ref().map_or(1, |m| u8::from(m[i]));
                s.push_str(&format!(",{m}\n"));
            }
        }
        s
    }

    /// Writes `attention.csv`, `attention.pgm` (head mean, peak scaled to
    /// 255) and `mask.pgm`.
    pub fn write(&self, dir: &FsPath) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("attention.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let mean = self.mean_weights();
        let peak = mean.iter().cloned().fold(0.0, f64::max);
        let bytes: Vec<u8> = mean
            .iter()
            .map(|&v| if peak > 0.0 { (v / peak * 255.0).round() as u8 } else { 0 })
            .collect();
        write_pgm(&dir.join("attention.pgm"), self.width, self.height, &bytes)?;
        let mask: Vec<u8> = (0..self.height * self.width)
            .map(|i| if self.mask.as_ref().map_or(true, |m| m[i]) { 255 } else { 0 })
            .collect();
        write_pgm(&dir.join("mask.pgm"), self.width, self.height, &mask)
    }
}

/// Pooling attention of sensor frame `frame` of a sample's history.
pub fn dump_attention(net: &Network, s: &Sample, frame: usize) -> Result<AttentionMap> {
    if net.lidar.is_none() {
        return Err(Error::InvalidArgument("model has no LiDAR branch".into()));
    }
    if frame >= s.lidar.len() {
        return Err(Error::OutOfRange {
            index: frame,
            size: s.lidar.len(),
        });
    }
    let mut tape = Tape::new();
    let protos = tape.constant(net.prototype_tensor()?);
    let trace = net.forward_traced(&mut tape, &net.store, s, protos)?;
    let probs = tape
        .attention_probs(trace.lidar_pool[frame])
        .ok_or_else(|| Error::InvalidArgument("pooling output is not an attention node".into()))?;
    let grid = &net.config.pillar.grid;
    let cells = grid.n_cells();
    let mask = match &net.masks {
        Some(m) => Some(m.get(s.guide[frame])?.1.to_vec()),
        None => None,
    };
    Ok(AttentionMap {
        height: grid.height_cells,
        width: grid.width_cells,
        weights: probs.chunks_exact(cells).map(<[f64]>::to_vec).collect(),
        mask,
    })
}
