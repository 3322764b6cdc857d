//! Sliding-window samples cut from labelled trajectories.

use std::sync::Arc;

use rayon::prelude::*;

use crate::encoders::{image_patches, pillarize, Pillars};
use crate::error::{Error, Result};
use crate::scene::{frame_seed, label_frame, Dataset, GenConfig, Split, TrajectoryData};
use crate::tensor::Tensor;

use super::ModelConfig;

/// One forecasting window: `P` past beams, `W` future beams and the sensor
/// frames observed during the history.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub trajectory: String,
    /// Tick of the first history step.
    pub start: usize,
    pub q_hist: Vec<usize>,
    pub q_future: Vec<usize>,
    /// Transmit-beam powers of every future step, `W x Q`.
    pub future_gains: Vec<Vec<f64>>,
    /// Optimal beam at each sensor frame, used to pick the BEV mask.
    pub guide: Vec<usize>,
    pub lidar: Vec<Arc<Pillars>>,
    pub images: Vec<Arc<Tensor>>,
}

impl Sample {
    /// Checks the sample matches the model's window and modalities.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let frames = cfg.alignment().frames();
        if self.q_hist.len() != cfg.p_hist {
            return Err(Error::shape("sample", format!("{} history steps, expected {}", self.q_hist.len(), cfg.p_hist)));
        }
        if self.q_future.len() != cfg.w_horizon || self.future_gains.len() != cfg.w_horizon {
            return Err(Error::shape("sample", format!("{} future steps, expected {}", self.q_future.len(), cfg.w_horizon)));
        }
        if cfg.modalities.lidar() && (self.lidar.len() != frames || self.guide.len() != frames) {
            return Err(Error::MalformedSample(format!("LiDAR frames in window at tick {}", self.start)));
        }
        if cfg.modalities.camera() && self.images.len() != frames {
            return Err(Error::MalformedSample(format!("camera frames in window at tick {}", self.start)));
        }
        Ok(())
    }
}

/// Cuts every window of a trajectory. Windows start on sensor-period
/// boundaries every `sample_stride` periods; sensor features are computed
/// once per frame and shared between overlapping windows.
pub fn extract_samples(traj: &TrajectoryData, cfg: &ModelConfig, gen: &GenConfig) -> Result<Vec<Sample>> {
    cfg.check_data(gen)?;
    let (p, w, j) = (cfg.p_hist, cfg.w_horizon, cfg.j_ratio);
    let frames = &traj.frames;
    let n = frames.len();
    if n < p + w {
        return Ok(Vec::new());
    }
    let sensor_ticks: Vec<usize> = (0..n).filter(|t| (t + 1) % j == 0).collect();
    let slot = |t: usize| (t + 1) / j - 1;

    let lidar: Vec<Arc<Pillars>> = if cfg.modalities.lidar() {
        sensor_ticks
            .iter()
            .map(|&t| {
                let cloud = frames[t]
                    .point_cloud
                    .as_ref()
                    .ok_or_else(|| Error::MalformedSample(format!("point_cloud at tick {t} of {}", traj.entry.id)))?;
                Ok(Arc::new(pillarize(cloud, &cfg.pillar, frame_seed(traj.entry.seed, t))))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let images: Vec<Arc<Tensor>> = if cfg.modalities.camera() {
        sensor_ticks
            .iter()
            .map(|&t| {
                let img = frames[t]
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::MalformedSample(format!("image at tick {t} of {}", traj.entry.id)))?;
                Ok(Arc::new(image_patches(img, cfg.patch_size)?))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let (tx_cb, rx_cb) = gen.codebooks()?;
    let gains_at = |t: usize| -> Result<Vec<f64>> {
        match &frames[t].tx_gains {
            Some(g) => Ok(g.clone()),
            None => Ok(label_frame(&frames[t].paths, &gen.array, &gen.subcarriers, &tx_cb, &rx_cb)?
                .optimal_tx_row()
                .to_vec()),
        }
    };

    let mut out = Vec::new();
    let mut start = 0;
    while start + p + w <= n {
        let window: Vec<usize> = (start..start + p).filter(|t| (t + 1) % j == 0).collect();
        out.push(Sample {
            trajectory: traj.entry.id.clone(),
            start,
            q_hist: frames[start..start + p].iter().map(|f| f.q_star()).collect(),
            q_future: frames[start + p..start + p + w].iter().map(|f| f.q_star()).collect(),
            future_gains: (start + p..start + p + w).map(gains_at).collect::<Result<_>>()?,
            guide: window.iter().map(|&t| frames[t].q_star()).collect(),
            lidar: if lidar.is_empty() { Vec::new() } else { window.iter().map(|&t| lidar[slot(t)].clone()).collect() },
            images: if images.is_empty() { Vec::new() } else { window.iter().map(|&t| images[slot(t)].clone()).collect() },
        });
        start += j * cfg.sample_stride;
    }
    Ok(out)
}

/// Samples of every trajectory of a split, in manifest order.
pub fn samples_for_split(ds: &Dataset, split: Split, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let gen = &ds.manifest.config;
    let per: Vec<Vec<Sample>> = ds
        .split(split)
        .par_iter()
        .map(|t| extract_samples(t, cfg, gen))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}
