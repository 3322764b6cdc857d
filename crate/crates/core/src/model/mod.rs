//! Beam forecasting network: encoders, fusion, causal backbone and output
//! projection, plus training and inference.

mod data;
mod train;

use std::fmt;
use std::path::Path as FsPath;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{normalize_indices, BeamMaskSet, ImageEncoder, IndexEmbed, LidarEncoder, PillarConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    assemble_llm_input, cross_modality_attend, stack_modalities, temporal_align, AlignmentConfig, PromptEncoder,
    PromptStats, Reprogrammer,
};
use crate::nn::{Linear, TransformerBlock};
use crate::scene::GenConfig;
use crate::tensor::{load_checkpoint, save_checkpoint, AttentionParams, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

pub use data::{extract_samples, samples_for_split, Sample};
pub use train::{mean_loss, train, EpochLog, TrainLog};

pub const MODEL_CONFIG_FORMAT: &str = "mmw-model/1";

/// Input modalities; the beam-index history is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModalitySet {
    Index,
    IndexLidar,
    IndexCamera,
    All,
}

impl ModalitySet {
    pub const ALL: [ModalitySet; 4] = [Self::Index, Self::IndexLidar, Self::IndexCamera, Self::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::Index => "index",
            Self::IndexLidar => "index+lidar",
            Self::IndexCamera => "index+camera",
            Self::All => "all",
        }
    }

    pub fn lidar(self) -> bool {
        matches!(self, Self::IndexLidar | Self::All)
    }

    pub fn camera(self) -> bool {
        matches!(self, Self::IndexCamera | Self::All)
    }

    pub fn count(self) -> usize {
        1 + self.lidar() as usize + self.camera() as usize
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality set `{s}`")))
    }
}

impl TryFrom<String> for ModalitySet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModalitySet> for String {
    fn from(m: ModalitySet) -> String {
        m.name().to_string()
    }
}

/// Architecture and optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub format: String,
    pub modalities: ModalitySet,
    /// Beam-guided masking of the LiDAR BEV features.
    pub bgam: bool,
    pub d_m: usize,
    pub d_model: usize,
    /// Leading components of each backbone output row fed to the head.
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub l_prom: usize,
    pub p_hist: usize,
    pub w_horizon: usize,
    pub q_beams: usize,
    pub j_ratio: usize,
    pub vocab_size: usize,
    pub prototypes: usize,
    pub lidar_channels: usize,
    pub pillar: PillarConfig,
    pub cam_resolution: [usize; 2],
    pub patch_size: usize,
    pub cam_dim: usize,
    pub cam_layers: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Training windows start every `sample_stride` sensor periods.
    pub sample_stride: usize,
    /// Adds the last observed normalised beam to every output, so the head
    /// learns a correction to persistence, expressed in beams.
    pub persistence_skip: bool,
    /// Feeds the index embedding beam offsets from the last observed beam
    /// instead of the normalised indices.
    pub center_history: bool,
    /// Global gradient-norm clip per minibatch; 0 disables it.
    pub grad_clip: f64,
    /// Optimiser steps over which the learning rate ramps linearly up to `lr`.
    pub warmup_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            format: MODEL_CONFIG_FORMAT.into(),
            modalities: ModalitySet::IndexLidar,
            bgam: true,
            d_m: 32,
            d_model: 64,
            d_ff: 16,
            n_heads: 4,
            n_layers: 2,
            l_prom: 4,
            p_hist: 40,
            w_horizon: 10,
            q_beams: 16,
            j_ratio: 10,
            vocab_size: 1024,
            prototypes: 32,
            lidar_channels: 8,
            pillar: PillarConfig::default(),
            cam_resolution: [32, 32],
            patch_size: 8,
            cam_dim: 16,
            cam_layers: 2,
            seed: 0,
            lr: 1e-3,
            batch: 16,
            epochs: 30,
            patience: 10,
            sample_stride: 1,
            persistence_skip: true,
            center_history: true,
            grad_clip: 1.0,
            warmup_steps: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.format != MODEL_CONFIG_FORMAT {
            return bad(format!("model config format `{}`, expected `{MODEL_CONFIG_FORMAT}`", self.format));
        }
        if self.n_heads == 0 || self.d_m % self.n_heads != 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_m {} and D {} must be divisible by {} heads", self.d_m, self.d_model, self.n_heads));
        }
        if self.camera_needed() && self.cam_dim % self.n_heads != 0 {
            return bad(format!("camera width {} must be divisible by {} heads", self.cam_dim, self.n_heads));
        }
        if self.d_ff == 0 || self.d_ff > self.d_model {
            return bad(format!("D_ff {} must be in 1..=D ({})", self.d_ff, self.d_model));
        }
        if self.p_hist < 3 {
            return bad("history must cover at least 3 steps".into());
        }
        if self.l_prom > 0 && self.p_hist < 8 {
            return bad("prompt statistics need a history of at least 8 steps".into());
        }
        if self.q_beams == 0 || self.prototypes == 0 || self.vocab_size == 0 {
            return bad("Q, V and V' must be >= 1".into());
        }
        if self.batch == 0 || self.sample_stride == 0 {
            return bad("batch and sample stride must be >= 1".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("gradient clip must be >= 0".into());
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        self.alignment().validate()?;
        if self.modalities.lidar() {
            self.pillar.validate()?;
        }
        Ok(())
    }

    fn camera_needed(&self) -> bool {
        self.modalities.camera()
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            p_hist: self.p_hist,
            w_horizon: self.w_horizon,
            j_ratio: self.j_ratio,
        }
    }

    /// Checks the data produces what this model expects.
    pub fn check_data(&self, gen: &GenConfig) -> Result<()> {
        let j = gen.period_ticks()?;
        if j != self.j_ratio {
            return Err(Error::InvalidArgument(format!("data sensor period is {j} ticks, model expects {}", self.j_ratio)));
        }
        if gen.codebook.q_tx != self.q_beams {
            return Err(Error::InvalidArgument(format!(
                "data codebook has {} beams, model expects {}",
                gen.codebook.q_tx, self.q_beams
            )));
        }
        if self.modalities.camera() && gen.sensors.cam_resolution != self.cam_resolution {
            return Err(Error::InvalidArgument(format!(
                "data camera is {:?}, model expects {:?}",
                gen.sensors.cam_resolution, self.cam_resolution
            )));
        }
        Ok(())
    }
}

/// Point forecast on the normalised scale and its beam indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub y_hat: Vec<f64>,
    pub q_hat: Vec<usize>,
}

/// `clamp(round(y Q), 0, Q - 1)`.
pub fn denormalize(y: f64, q_count: usize) -> usize {
    let v = (y * q_count as f64).round();
    if v.is_nan() || v <= 0.0 {
        0
    } else {
        (v as usize).min(q_count - 1)
    }
}

/// `(1/W) sum (y Q - q*)^2` on the index scale.
pub fn mse_loss(tape: &mut Tape, y_hat: Var, q_star: &[usize], q_count: usize) -> Result<Var> {
    let (r, w) = tape.dims(y_hat);
    if r != 1 || w != q_star.len() {
        return Err(Error::shape("mse_loss", format!("prediction {r}x{w} vs {} targets", q_star.len())));
    }
    let scaled = tape.scale(y_hat, q_count as f64);
    let target = tape.constant(Tensor::row(q_star.iter().map(|&q| q as f64).collect()));
    let d = tape.sub(scaled, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Registered parameters of every block.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub index_embed: IndexEmbed,
    pub lidar: Option<LidarEncoder>,
    pub camera: Option<ImageEncoder>,
    pub masks: Option<BeamMaskSet>,
    pub fusion_query: ParamId,
    pub fusion_attn: AttentionParams,
    pub reprogram: Reprogrammer,
    pub prompt: PromptEncoder,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub y_hat: Var,
    /// Per-frame pooling outputs of the LiDAR encoder.
    pub lidar_pool: Vec<Var>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let index_embed = IndexEmbed::register(&mut store, "embed", c.d_m, &mut rng)?;
        let lidar = if c.modalities.lidar() {
            Some(LidarEncoder::register(&mut store, "lidar", &c.pillar.grid, c.lidar_channels, c.d_m, c.n_heads, &mut rng)?)
        } else {
            None
        };
        let masks = if c.modalities.lidar() && c.bgam {
            Some(BeamMaskSet::new(&c.pillar.grid, c.q_beams)?)
        } else {
            None
        };
        let camera = if c.modalities.camera() {
            Some(ImageEncoder::register(
                &mut store,
                "camera",
                c.cam_resolution,
                c.patch_size,
                c.cam_dim,
                c.cam_layers,
                c.d_m,
                c.n_heads,
                &mut rng,
            )?)
        } else {
            None
        };
        let fusion_query = store.add_normal("fusion.query", &[c.p_hist, c.d_m], 1.0, &mut rng)?;
        let fusion_attn = AttentionParams::register(&mut store, "fusion.attn", c.d_m, c.n_heads, &mut rng)?;
        let reprogram = Reprogrammer::register(
            &mut store,
            "reprogram",
            c.vocab_size,
            c.prototypes,
            c.d_m,
            c.d_model,
            c.n_heads,
            c.seed ^ 0x5eed_0f_70c4b,
            &mut rng,
        )?;
        let prompt = PromptEncoder::register(&mut store, "prompt", c.l_prom, c.d_model, &mut rng)?;
        let positions = store.add_normal("positions", &[c.l_prom + c.p_hist, c.d_model], 0.02, &mut rng)?;
        let blocks = (0..c.n_layers)
            .map(|l| TransformerBlock::register(&mut store, &format!("backbone.block{l}"), c.d_model, c.n_heads, 2 * c.d_model, &mut rng))
            .collect::<Result<_>>()?;
        let head = Linear::register(&mut store, "head", c.p_hist * c.d_ff, c.w_horizon, true, &mut rng)?;
        if c.persistence_skip {
            // Start close to persistence.
            store.get_mut(head.w).tensor.data.iter_mut().for_each(|v| *v *= 0.1);
        } else {
            // Start from the middle of the codebook.
            let hb = head.b.expect("head has a bias");
            store.get_mut(hb).tensor.data.iter_mut().for_each(|v| *v = 0.5);
        }
        Ok(Self {
            config,
            store,
            index_embed,
            lidar,
            camera,
            masks,
            fusion_query,
            fusion_attn,
            reprogram,
            prompt,
            positions,
            blocks,
            head,
        })
    }

    /// Rebuilds the network described by a checkpoint and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.model_config.clone())?;
        let mut net = Self::new(config)?;
        net.load_params(&ckpt.store)?;
        Ok(net)
    }

    pub fn load_params(&mut self, src: &ParamStore) -> Result<()> {
        if src.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, network has {}",
                src.len(),
                self.store.len()
            )));
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.get(id).name.clone();
            let sid = src
                .id(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter `{name}`")))?;
            let t = &src.get(sid).tensor;
            let dst = &mut self.store.get_mut(id).tensor;
            if t.shape != dst.shape {
                return Err(Error::shape("load_params", format!("{name}: {:?} vs {:?}", t.shape, dst.shape)));
            }
            dst.data.clone_from(&t.data);
        }
        Ok(())
    }

    pub fn checkpoint(&self, data_config: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            store: self.store.clone(),
            model_config: serde_json::to_value(&self.config)?,
            data_config,
        })
    }

    pub fn save(&self, path: &FsPath, data_config: serde_json::Value) -> Result<()> {
        save_checkpoint(path, &self.checkpoint(data_config)?)
    }

    pub fn load(path: &FsPath) -> Result<(Self, serde_json::Value)> {
        let ckpt = load_checkpoint(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt.data_config))
    }

    /// `U_B`: `P x d_m` index embedding.
    pub fn embed_indices(&self, tape: &mut Tape, store: &ParamStore, q_hist: &[usize]) -> Result<Var> {
        let mut y = normalize_indices(q_hist, self.config.q_beams)?;
        if self.config.center_history {
            let q = self.config.q_beams as f64;
            let last = *y.last().ok_or(Error::Empty("beam history"))?;
            y.iter_mut().for_each(|v| *v = (*v - last) * q);
        }
        let seq = tape.constant(Tensor::matrix(y.len(), 1, y)?);
        self.index_embed.forward(tape, store, seq)
    }

    /// Per-frame LiDAR summaries, aligned to `P x d_m`.
    pub fn lidar_features(&self, tape: &mut Tape, store: &ParamStore, s: &Sample, pools: &mut Vec<Var>) -> Result<Var> {
        let enc = self.lidar.as_ref().expect("lidar encoder");
        let mut rows = Vec::with_capacity(s.lidar.len());
        for (k, pillars) in s.lidar.iter().enumerate() {
            let mask = match &self.masks {
                Some(m) => Some(m.get(s.guide[k])?),
                None => None,
            };
            let u = enc.encode_frame(tape, store, pillars, mask)?;
            pools.push(u);
            rows.push(u);
        }
        let sparse = tape.concat_rows(&rows)?;
        temporal_align(tape, sparse, self.config.j_ratio, self.config.p_hist)
    }

    pub fn camera_features(&self, tape: &mut Tape, store: &ParamStore, s: &Sample) -> Result<Var> {
        let enc = self.camera.as_ref().expect("camera encoder");
        let rows = s
            .images
            .iter()
            .map(|p| enc.encode(tape, store, p))
            .collect::<Result<Vec<_>>>()?;
        let sparse = tape.concat_rows(&rows)?;
        temporal_align(tape, sparse, self.config.j_ratio, self.config.p_hist)
    }

    /// `B'`: `P x d_m` fused features.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, parts: &[Var]) -> Result<Var> {
        let stacked = stack_modalities(tape, parts)?;
        let q = tape.param(store, self.fusion_query);
        cross_modality_attend(tape, store, stacked, q, &self.fusion_attn)
    }

    /// Causal pre-norm blocks; identity with zero layers.
    pub fn backbone_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h, true)?;
        }
        Ok(h)
    }

    /// Last `P` rows, first `D_ff` columns, flattened, then `W_out`.
    pub fn project_output(&self, tape: &mut Tape, store: &ParamStore, o: Var) -> Result<Var> {
        let c = &self.config;
        let rows = tape.dims(o).0;
        if rows < c.p_hist {
            return Err(Error::shape("project_output", format!("{rows} rows, need at least {}", c.p_hist)));
        }
        let tail = tape.slice_rows(o, rows - c.p_hist, c.p_hist)?;
        let cut = tape.slice_cols(tail, 0, c.d_ff)?;
        let flat = tape.reshape(cut, &[1, c.p_hist * c.d_ff])?;
        self.head.forward(tape, store, flat)
    }

    /// Full forward pass of one sample. `prototypes` comes from
    /// [`Reprogrammer::prototypes`] on the same tape.
    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, s: &Sample, prototypes: Var) -> Result<ForwardTrace> {
        let c = &self.config;
        s.check(c)?;
        let mut parts = vec![self.embed_indices(tape, store, &s.q_hist)?];
        let mut lidar_pool = Vec::new();
        if self.lidar.is_some() {
            parts.push(self.lidar_features(tape, store, s, &mut lidar_pool)?);
        }
        if self.camera.is_some() {
            parts.push(self.camera_features(tape, store, s)?);
        }
        let fused = self.fuse(tape, store, &parts)?;
        let z = self.reprogram.forward(tape, store, fused, prototypes)?;
        let y = normalize_indices(&s.q_hist, c.q_beams)?;
        let prefix = self.prompt.forward(tape, store, &PromptStats::compute(&y)?, c.p_hist)?;
        let zt = assemble_llm_input(tape, prefix, z)?;
        let pos = tape.param(store, self.positions);
        let zt = tape.add(zt, pos)?;
        let o = self.backbone_forward(tape, store, zt)?;
        let mut y_hat = self.project_output(tape, store, o)?;
        if c.persistence_skip {
            y_hat = tape.scale(y_hat, 1.0 / c.q_beams as f64);
            let last = tape.constant(Tensor::row(vec![y[c.p_hist - 1]; c.w_horizon]));
            y_hat = tape.add(y_hat, last)?;
        }
        Ok(ForwardTrace { y_hat, lidar_pool })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, s: &Sample, prototypes: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, store, s, prototypes)?.y_hat)
    }

    /// Current `E'` values, shareable across tapes.
    pub fn prototype_tensor(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.reprogram.prototypes(&mut tape, &self.store)?;
        Ok(tape.tensor(e))
    }

    pub fn predict(&self, s: &Sample) -> Result<Forecast> {
        self.predict_with(&self.prototype_tensor()?, s)
    }

    /// Prediction with prototypes from [`Network::prototype_tensor`].
    pub fn predict_with(&self, prototypes: &Tensor, s: &Sample) -> Result<Forecast> {
        let mut tape = Tape::new();
        let protos = tape.constant(prototypes.clone());
        let y = self.forward(&mut tape, &self.store, s, protos)?;
        let y_hat = tape.value(y).to_vec();
        let q = self.config.q_beams;
        Ok(Forecast {
            q_hat: y_hat.iter().map(|&v| denormalize(v, q)).collect(),
            y_hat,
        })
    }
}
