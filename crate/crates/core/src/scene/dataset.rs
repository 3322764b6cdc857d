use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::phy::{
    averaged_channel, normalize_delays, optimal_beam_pair, ArrayConfig, BeamLayout, BeamSearch,
    Codebook, Path, SubcarrierGrid,
};

use super::sensors::{render_camera, render_lidar, ImageRaster, PointCloud, SensorSpec};
use super::trace::trace_paths;
use super::{build_scenario, Pose, Scenario, SceneConfig, Template};

pub const DATASET_FORMAT: &str = "mmw-lite/1";
pub const GEN_CONFIG_FORMAT: &str = "mmw-gen/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub q_tx: usize,
    pub q_rx: usize,
    pub layout: BeamLayout,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            q_tx: 16,
            q_rx: 4,
            layout: BeamLayout::SinCentered,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 24,
            val: 4,
            test: 28,
        }
    }
}

/// Everything `gen` needs besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub format: String,
    /// Trajectory `i` of a split uses `templates[i % len]`.
    pub templates: Vec<String>,
    pub scene: SceneConfig,
    pub splits: SplitCounts,
    pub array: ArrayConfig,
    pub subcarriers: SubcarrierGrid,
    pub codebook: CodebookConfig,
    pub sensors: SensorSpec,
    pub grid: BevGridSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            format: GEN_CONFIG_FORMAT.into(),
            templates: Template::ALL.iter().map(|t| t.name().to_string()).collect(),
            scene: SceneConfig::default(),
            splits: SplitCounts::default(),
            array: ArrayConfig::default(),
            subcarriers: SubcarrierGrid::default(),
            codebook: CodebookConfig::default(),
            sensors: SensorSpec::default(),
            grid: BevGridSpec::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format != GEN_CONFIG_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "config format `{}`, expected `{GEN_CONFIG_FORMAT}`",
                self.format
            )));
        }
        if self.templates.is_empty() {
            return Err(Error::Empty("template list"));
        }
        for t in &self.templates {
            t.parse::<Template>()?;
        }
        self.array.validate()?;
        self.grid.validate()?;
        self.sensors.period_ticks(self.scene.tick_s)?;
        if self.codebook.q_tx == 0 || self.codebook.q_rx == 0 {
            return Err(Error::InvalidArgument("codebook sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn period_ticks(&self) -> Result<usize> {
        self.sensors.period_ticks(self.scene.tick_s)
    }

    pub fn codebooks(&self) -> Result<(Codebook, Codebook)> {
        Ok((
            Codebook::new(self.codebook.layout, self.codebook.q_tx, self.array.n_tx)?,
            Codebook::new(self.codebook.layout, self.codebook.q_rx, self.array.n_rx)?,
        ))
    }
}

/// One channel tick of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t_index: usize,
    pub ego: Pose,
    pub paths: Vec<Path>,
    /// `(p*, q*)`: optimal combiner and precoder.
    pub optimal_pair: [usize; 2],
    /// Transmit-beam powers under the optimal combiner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_gains: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_cloud: Option<PointCloud>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRaster>,
}

impl FrameRecord {
    pub fn q_star(&self) -> usize {
        self.optimal_pair[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryEntry {
    pub id: String,
    pub seed: u64,
    pub template: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub sensor_period_ticks: usize,
    pub config: GenConfig,
    pub train: Vec<TrajectoryEntry>,
    pub val: Vec<TrajectoryEntry>,
    pub test: Vec<TrajectoryEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> &[TrajectoryEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryData {
    pub entry: TrajectoryEntry,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<TrajectoryData>,
    pub val: Vec<TrajectoryData>,
    pub test: Vec<TrajectoryData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TrajectoryData] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<TrajectoryData> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Generates every split in memory.
    pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let j = cfg.period_ticks()?;
        let mut out = Dataset {
            manifest: Manifest {
                format: DATASET_FORMAT.into(),
                seed,
                sensor_period_ticks: j,
                config: cfg.clone(),
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            },
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut seen = std::collections::HashSet::new();
        for split in Split::ALL {
            let count = match split {
                Split::Train => cfg.splits.train,
                Split::Val => cfg.splits.val,
                Split::Test => cfg.splits.test,
            };
            for i in 0..count {
                let tseed = trajectory_seed(seed, split, i);
                if !seen.insert(tseed) {
                    return Err(Error::InvalidArgument(format!("trajectory seed collision at {tseed}")));
                }
                let template = cfg.templates[i % cfg.templates.len()].clone();
                let id = format!("{}-{i:04}", split.name());
                let traj = generate_trajectory(cfg, &template, tseed, id)?;
                out.split_mut(split).push(traj);
            }
            let entries = out.split(split).iter().map(|t| t.entry.clone()).collect();
            match split {
                Split::Train => out.manifest.train = entries,
                Split::Val => out.manifest.val = entries,
                Split::Test => out.manifest.test = entries,
            }
        }
        Ok(out)
    }

    /// Writes `<dir>/<split>/<id>/frames.jsonl` and `<dir>/manifest.json`.
    pub fn write(&self, dir: &FsPath) -> Result<()> {
        for split in Split::ALL {
            for traj in self.split(split) {
                let tdir = dir.join(split.name()).join(&traj.entry.id);
                fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
                let path = tdir.join("frames.jsonl");
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(file);
                for f in &traj.frames {
                    serde_json::to_writer(&mut w, f)?;
                    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of trajectory `index` in `split`.
pub fn trajectory_seed(base: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(base) ^ (((split as u64 + 1) << 40) | index as u64))
}

/// Per-frame seed for any randomised per-frame processing.
pub fn frame_seed(trajectory_seed: u64, t_index: usize) -> u64 {
    splitmix64(trajectory_seed ^ splitmix64(t_index as u64))
}

/// Exhaustive-search label of a path set on the subcarrier-averaged channel.
pub fn label_frame(
    paths: &[Path],
    array: &ArrayConfig,
    grid: &SubcarrierGrid,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<BeamSearch> {
    let h = averaged_channel(&normalize_delays(paths), grid, array)?;
    optimal_beam_pair(&h, tx_cb, rx_cb)
}

fn render_frame(
    sc: &Scenario,
    t: usize,
    j: usize,
    cfg: &GenConfig,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<FrameRecord> {
    let paths = trace_paths(sc, t, &cfg.array);
    let search = label_frame(&paths, &cfg.array, &cfg.subcarriers, tx_cb, rx_cb)?;
    let sensor = (t + 1) % j == 0;
    Ok(FrameRecord {
        t_index: t,
        ego: sc.ego_pose(t),
        paths,
        optimal_pair: [search.p_star, search.q_star],
        tx_gains: Some(search.optimal_tx_row().to_vec()),
        point_cloud: sensor.then(|| render_lidar(sc, t, &cfg.sensors)),
        image: sensor.then(|| render_camera(sc, t, &cfg.sensors)),
    })
}

/// Renders and labels every tick of one scenario. Frames are rendered in
/// parallel on the current rayon pool; the result does not depend on it.
pub fn generate_trajectory(cfg: &GenConfig, template: &str, seed: u64, id: String) -> Result<TrajectoryData> {
    let scene_cfg = SceneConfig {
        template: template.to_string(),
        ..cfg.scene.clone()
    };
    let sc = build_scenario(&scene_cfg, seed)?;
    let j = cfg.period_ticks()?;
    let (tx_cb, rx_cb) = cfg.codebooks()?;
    let frames = (0..sc.n_ticks())
        .into_par_iter()
        .map(|t| render_frame(&sc, t, j, cfg, &tx_cb, &rx_cb))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryData {
        entry: TrajectoryEntry {
            id,
            seed,
            template: template.to_string(),
            frames: frames.len(),
        },
        frames,
    })
}

/// Generates and writes a dataset, returning its manifest.
pub fn gen_dataset(cfg: &GenConfig, seed: u64, out_dir: &FsPath) -> Result<Manifest> {
    let ds = Dataset::generate(cfg, seed)?;
    ds.write(out_dir)?;
    Ok(ds.manifest)
}

pub fn read_frames(path: &FsPath) -> Result<Vec<FrameRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        frames.push(f);
    }
    Ok(frames)
}

/// Reads a dataset written by [`Dataset::write`].
pub fn load_dataset(dir: &FsPath) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::format(
            &mpath,
            format!("dataset format `{}`, expected `{DATASET_FORMAT}`", manifest.format),
        ));
    }
    let mut ds = Dataset {
        manifest: manifest.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        for entry in manifest.entries(split) {
            let path = dir.join(split.name()).join(&entry.id).join("frames.jsonl");
            let frames = read_frames(&path)?;
            if frames.len() != entry.frames {
                return Err(Error::format(
                    &path,
                    format!("{} frames, manifest lists {}", frames.len(), entry.frames),
                ));
            }
            ds.split_mut(split).push(TrajectoryData {
                entry: entry.clone(),
                frames,
            });
        }
    }
    Ok(ds)
}
