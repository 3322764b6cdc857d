//! Per-modality encoders: beam-index embedding, pillar BEV LiDAR encoder
//! with beam-guided masking, and a patch transformer for the camera raster.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{beam_mask, bev_angle_grid, BevGridSpec};
use crate::nn::{Linear, TransformerBlock};
use crate::scene::{ImageRaster, PointCloud};
use crate::tensor::{
    multi_head_attention, AttentionOptions, AttentionParams, ParamId, ParamStore, Tape, Tensor, Var,
};

/// Width of an augmented pillar point.
pub const PILLAR_FEATURES: usize = 9;

/// `q / Q` for every history index.
pub fn normalize_indices(q_hist: &[usize], q_count: usize) -> Result<Vec<f64>> {
    q_hist
        .iter()
        .map(|&q| {
            if q < q_count {
                Ok(q as f64 / q_count as f64)
            } else {
                Err(Error::OutOfRange {
                    index: q,
                    size: q_count,
                })
            }
        })
        .collect()
}

/// Kernel-3 temporal convolution from the scalar index sequence to `d_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEmbed {
    pub w: ParamId,
    pub b: ParamId,
}

impl IndexEmbed {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, d_m: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(&format!("{prefix}.w"), 3, d_m, rng)?,
            b: store.add_zeros(&format!("{prefix}.b"), &[1, d_m])?,
        })
    }

    /// `P x d_m` embedding of a `P x 1` sequence.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let (p, c) = tape.dims(seq);
        if p < 3 || c != 1 {
            return Err(Error::shape("embed_indices", format!("need P >= 3 rows of width 1, got {p}x{c}")));
        }
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.conv1d(seq, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarConfig {
    pub grid: BevGridSpec,
    pub max_pillars: usize,
    pub max_points_per_pillar: usize,
    /// Multiplier applied to metric coordinates and offsets.
    pub coord_scale: f64,
}

impl Default for PillarConfig {
    fn default() -> Self {
        let grid = BevGridSpec::default();
        Self {
            max_pillars: grid.n_cells(),
            grid,
            max_points_per_pillar: 16,
            coord_scale: 0.1,
        }
    }
}

impl PillarConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.max_pillars == 0 || self.max_points_per_pillar == 0 {
            return Err(Error::InvalidArgument("pillar caps must be >= 1".into()));
        }
        if self.grid.height_cells % 2 != 0 || self.grid.width_cells % 2 != 0 {
            return Err(Error::InvalidArgument("BEV grid dimensions must be even".into()));
        }
        Ok(())
    }
}

/// Occupied pillars of one frame, padded to `max_points` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct Pillars {
    pub max_points: usize,
    /// `(n_pillars * max_points) x 9`, padding rows zero.
    pub features: Tensor,
    pub counts: Vec<usize>,
    /// Flat cell index `i * W + j` of each pillar.
    pub cells: Vec<usize>,
}

impl Pillars {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Groups in-grid points into pillars and augments each point to
/// `(x, y, z, i, dx_c, dy_c, dz_c, dx_p, dy_p)`: offsets from the pillar's
/// point centroid and from the pillar centre. Overflowing pillars keep a
/// random subset drawn from a per-cell stream of `seed`.
pub fn pillarize(cloud: &PointCloud, cfg: &PillarConfig, seed: u64) -> Pillars {
    let grid = &cfg.grid;
    let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, p) in cloud.points.iter().enumerate() {
        if let Some((i, j)) = grid.cell_of(p[0], p[1]) {
            by_cell.entry(i * grid.width_cells + j).or_default().push(k);
        }
    }
    let mut cells: Vec<(usize, Vec<usize>)> = by_cell.into_iter().collect();
    if cells.len() > cfg.max_pillars {
        cells.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        cells.truncate(cfg.max_pillars);
        cells.sort_by_key(|c| c.0);
    }
    let mp = cfg.max_points_per_pillar;
    let s = cfg.coord_scale;
    let mut features = vec![0.0; cells.len() * mp * PILLAR_FEATURES];
    let mut counts = Vec::with_capacity(cells.len());
    let mut cell_ids = Vec::with_capacity(cells.len());
    for (g, (cell, mut idx)) in cells.into_iter().enumerate() {
        if idx.len() > mp {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(cell as u64);
            for k in 0..mp {
                let r = rng.gen_range(k..idx.len());
                idx.swap(k, r);
            }
            idx.truncate(mp);
            idx.sort_unstable();
        }
        let n = idx.len() as f64;
        let mut centroid = [0.0; 3];
        for &k in &idx {
            for d in 0..3 {
                centroid[d] += cloud.points[k][d] / n;
            }
        }
        let center = grid.cell_center(cell / grid.width_cells, cell % grid.width_cells);
        for (r, &k) in idx.iter().enumerate() {
            let p = cloud.points[k];
            let row = &mut features[(g * mp + r) * PILLAR_FEATURES..(g * mp + r + 1) * PILLAR_FEATURES];
            row.copy_from_slice(&[
                p[0] * s,
                p[1] * s,
                p[2] * s,
                p[3],
                (p[0] - centroid[0]) * s,
                (p[1] - centroid[1]) * s,
                (p[2] - centroid[2]) * s,
                (p[0] - center[0]) * s,
                (p[1] - center[1]) * s,
            ]);
        }
        counts.push(idx.len());
        cell_ids.push(cell);
    }
    Pillars {
        max_points: mp,
        features: Tensor {
            shape: vec![cell_ids.len() * mp, PILLAR_FEATURES],
            data: features,
        },
        counts,
        cells: cell_ids,
    }
}

/// Column factors and key flags of every beam's BEV mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamMaskSet {
    pub q_count: usize,
    pub factors: Vec<Vec<f64>>,
    pub keys: Vec<Vec<bool>>,
}

impl BeamMaskSet {
    pub fn new(grid: &BevGridSpec, q_count: usize) -> Result<Self> {
        let theta = bev_angle_grid(grid)?;
        let mut factors = Vec::with_capacity(q_count);
        let mut keys = Vec::with_capacity(q_count);
        for q in 0..q_count {
            let m = beam_mask(q, q_count, &theta)?;
            keys.push(m.bits.iter().map(|&b| b == 1).collect());
            factors.push(m.as_f64());
        }
        Ok(Self {
            q_count,
            factors,
            keys,
        })
    }

    pub fn get(&self, q: usize) -> Result<(&[f64], &[bool])> {
        if q >= self.q_count {
            return Err(Error::OutOfRange {
                index: q,
                size: self.q_count,
            });
        }
        Ok((&self.factors[q], &self.keys[q]))
    }
}

/// Pillar feature net, two-scale BEV backbone and query pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarEncoder {
    pub channels: usize,
    pub grid: [usize; 2],
    pub point: Linear,
    pub conv: ParamId,
    pub down: ParamId,
    pub fuse: ParamId,
    pub query: ParamId,
    pub attn: AttentionParams,
}

impl LidarEncoder {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        grid: &BevGridSpec,
        channels: usize,
        d_m: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let conv_std = 1.0 / ((c * 9) as f64).sqrt();
        Ok(Self {
            channels: c,
            grid: [grid.height_cells, grid.width_cells],
            point: Linear::register(store, &format!("{prefix}.point"), PILLAR_FEATURES, c, true, rng)?,
            conv: store.add_normal(&format!("{prefix}.conv"), &[c, c * 9], conv_std, rng)?,
            down: store.add_normal(&format!("{prefix}.down"), &[c, c * 9], conv_std, rng)?,
            fuse: store.add_normal(&format!("{prefix}.fuse"), &[c, 2 * c], 1.0 / ((2 * c) as f64).sqrt(), rng)?,
            query: store.add_normal(&format!("{prefix}.query"), &[1, c], 1.0, rng)?,
            attn: AttentionParams::register_io(store, &format!("{prefix}.attn"), c, c, d_m, heads, rng)?,
        })
    }

    fn n_cells(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// `C x (H W)` pseudo-image of per-pillar max-pooled point features.
    pub fn scatter(&self, tape: &mut Tape, store: &ParamStore, pillars: &Pillars) -> Result<Var> {
        let n = self.n_cells();
        if let Some(&bad) = pillars.cells.iter().find(|&&c| c >= n) {
            return Err(Error::OutOfRange { index: bad, size: n });
        }
        if pillars.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[self.channels, n])));
        }
        let x = tape.constant(pillars.features.clone());
        let h = self.point.forward(tape, store, x)?;
        let h = tape.relu(h);
        let g = tape.group_max(h, pillars.max_points, &pillars.counts)?;
        tape.scatter_cells(g, &pillars.cells, n)
    }

    /// Conv stack: 3x3, stride-2 3x3, nearest upsample, concat, 1x1 fuse.
    /// Bias-free, so an all-zero pseudo-image stays zero.
    pub fn backbone(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let [h, w] = self.grid;
        let c = self.channels;
        let zero = tape.constant(Tensor::zeros(&[1, c]));
        let x = tape.reshape(image, &[c, h, w])?;
        let wc = tape.param(store, self.conv);
        let a = tape.conv2d(x, wc, zero, 1)?;
        let a = tape.relu(a);
        let wd = tape.param(store, self.down);
        let b = tape.conv2d(a, wd, zero, 2)?;
        let b = tape.relu(b);
        let u = tape.upsample2x(b)?;
        let cat = tape.concat_rows(&[a, u])?;
        let cat = tape.reshape(cat, &[2 * c, h * w])?;
        let wf = tape.param(store, self.fuse);
        let f = tape.matmul(wf, cat)?;
        Ok(tape.relu(f))
    }

    /// `X_L`: `C x (H W)`. With a mask, out-of-mask cells are zeroed before
    /// and after the backbone.
    pub fn pillar_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pillars: &Pillars,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let mut s = self.scatter(tape, store, pillars)?;
        if let Some(m) = mask {
            s = tape.scale_columns(s, m)?;
        }
        let x = self.backbone(tape, store, s)?;
        match mask {
            Some(m) => tape.scale_columns(x, m),
            None => Ok(x),
        }
    }

    /// Pools `X_L` into `1 x d_m` with the learnable query. Masked-out cells
    /// are zeroed and excluded from the softmax.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, x_l: Var, mask: Option<(&[f64], &[bool])>) -> Result<Var> {
        let x = match mask {
            Some((f, _)) => tape.scale_columns(x_l, f)?,
            None => x_l,
        };
        let tokens = tape.transpose(x);
        let q = tape.param(store, self.query);
        let opts = AttentionOptions {
            key_mask: mask.map(|(_, k)| k.to_vec()),
            ..AttentionOptions::default()
        };
        multi_head_attention(tape, store, q, tokens, &self.attn, &opts)
    }

    /// Full per-frame path; `mask` is `None` when beam guidance is off.
    pub fn encode_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pillars: &Pillars,
        mask: Option<(&[f64], &[bool])>,
    ) -> Result<Var> {
        let x = self.pillar_encode(tape, store, pillars, mask.map(|m| m.0))?;
        self.pool(tape, store, x, mask)
    }
}

/// Non-overlapping `z x z` patches of a raster, flattened channel-last:
/// `N_p x (2 z^2)`, patches in row-major order.
pub fn image_patches(img: &ImageRaster, z: usize) -> Result<Tensor> {
    if z == 0 || img.height % z != 0 || img.width % z != 0 {
        return Err(Error::InvalidArgument(format!(
            "raster {}x{} is not divisible into {z}x{z} patches",
            img.height, img.width
        )));
    }
    let (ph, pw) = (img.height / z, img.width / z);
    let dim = 2 * z * z;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for pi in 0..ph {
        for pj in 0..pw {
            for r in 0..z {
                let row = pi * z + r;
                let start = (row * img.width + pj * z) * 2;
                data.extend_from_slice(&img.data[start..start + 2 * z]);
            }
        }
    }
    Tensor::new(vec![ph * pw, dim], data)
}

/// Patch embedding with a class token and positions, a small
/// self-attention stack, then query pooling over the patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub patch: usize,
    pub n_patches: usize,
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub query: ParamId,
    pub attn: AttentionParams,
}

impl ImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        resolution: [usize; 2],
        patch: usize,
        d_c: usize,
        layers: usize,
        d_m: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [h, w] = resolution;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::InvalidArgument(format!("raster {h}x{w} is not divisible by patch {patch}")));
        }
        let n_patches = h * w / (patch * patch);
        let blocks = (0..layers)
            .map(|l| TransformerBlock::register(store, &format!("{prefix}.block{l}"), d_c, heads, 2 * d_c, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch,
            n_patches,
            proj: Linear::register(store, &format!("{prefix}.patch"), 2 * patch * patch, d_c, false, rng)?,
            cls: store.add_normal(&format!("{prefix}.cls"), &[1, d_c], 0.02, rng)?,
            pos: store.add_normal(&format!("{prefix}.pos"), &[n_patches + 1, d_c], 0.02, rng)?,
            blocks,
            query: store.add_normal(&format!("{prefix}.query"), &[1, d_c], 1.0, rng)?,
            attn: AttentionParams::register_io(store, &format!("{prefix}.attn"), d_c, d_c, d_m, heads, rng)?,
        })
    }

    /// Patch tokens after the encoder stack, class token removed.
    pub fn tokens(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        if patches.shape.first() != Some(&self.n_patches) {
            return Err(Error::shape("encode_image", format!("expected {} patches, got {:?}", self.n_patches, patches.shape)));
        }
        let x = tape.constant(patches.clone());
        let e = self.proj.forward(tape, store, x)?;
        let cls = tape.param(store, self.cls);
        let mut t = tape.concat_rows(&[cls, e])?;
        let pos = tape.param(store, self.pos);
        t = tape.add(t, pos)?;
        for b in &self.blocks {
            t = b.forward(tape, store, t, false)?;
        }
        tape.slice_rows(t, 1, self.n_patches)
    }

    /// `1 x d_m` summary of one raster given its patches.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let t = self.tokens(tape, store, patches)?;
        let q = tape.param(store, self.query);
        multi_head_attention(tape, store, q, t, &self.attn, &AttentionOptions::default())
    }
}
