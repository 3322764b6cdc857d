//! Fog and rain impairment of LiDAR point clouds.

use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ImageRaster, PointCloud};

pub const WEATHER_FORMAT: &str = "mmw-weather/1";

/// Two-way extinction of a return at range `r`.
pub fn attenuate(i0: f64, alpha: f64, r: f64) -> f64 {
    i0 * (-2.0 * alpha * r).exp()
}

fn default_true() -> bool {
    true
}

/// Fog with soft-target backscatter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogParams {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Extinction coefficient in 1/m.
    pub alpha_fog: f64,
    /// `(range_m, backscatter_intensity)` knots, linearly interpolated and
    /// held constant outside the first and last knot.
    pub backscatter_table: Vec<[f64; 2]>,
    pub fog_range_min_m: f64,
    pub fog_range_max_m: f64,
    pub i_threshold: f64,
    pub seed: u64,
}

impl Default for FogParams {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha_fog: 0.06,
            backscatter_table: vec![[0.0, 0.12], [5.0, 0.08], [10.0, 0.05], [20.0, 0.02], [40.0, 0.0]],
            fog_range_min_m: 1.0,
            fog_range_max_m: 15.0,
            i_threshold: 0.01,
            seed: 0,
        }
    }
}

impl FogParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("fog: {m}")));
        if !(self.alpha_fog >= 0.0) || !self.alpha_fog.is_finite() {
            return bad("alpha_fog must be finite and >= 0");
        }
        if !(self.i_threshold >= 0.0) || !(self.fog_range_min_m >= 0.0) || !(self.fog_range_max_m >= 0.0) {
            return bad("ranges and threshold must be >= 0");
        }
        for k in &self.backscatter_table {
            if !(k[1] >= 0.0) || !k[0].is_finite() {
                return bad("backscatter values must be finite and >= 0");
            }
        }
        for w in self.backscatter_table.windows(2) {
            if !(w[1][0] > w[0][0]) {
                return bad("backscatter ranges must be strictly increasing");
            }
            if w[1][1] > w[0][1] {
                return bad("backscatter table must be non-increasing in range");
            }
        }
        Ok(())
    }

    /// Backscatter intensity at range `r`; zero for an empty table.
    pub fn backscatter(&self, r: f64) -> f64 {
        let t = &self.backscatter_table;
        match t.len() {
            0 => 0.0,
            _ if r <= t[0][0] => t[0][1],
            n if r >= t[n - 1][0] => t[n - 1][1],
            _ => {
                let i = t.partition_point(|k| k[0] <= r);
                let ([r0, v0], [r1, v1]) = (t[i - 1], t[i]);
                v0 + (v1 - v0) * (r - r0) / (r1 - r0)
            }
        }
    }
}

/// Rain attenuation, range noise and sensitivity dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainParams {
    pub rate_mm_h: f64,
    pub beta: f64,
    pub b_exp: f64,
    /// Range noise standard deviation in metres.
    pub sigma0_m: f64,
    pub i_threshold: f64,
    pub seed: u64,
}

impl RainParams {
    /// Default constants with range noise scaled by the rain rate.
    pub fn with_rate(rate_mm_h: f64, seed: u64) -> Self {
        Self {
            rate_mm_h,
            beta: 0.01,
            b_exp: 0.6,
            sigma0_m: 0.02 * rate_mm_h / 10.0,
            i_threshold: 0.01,
            seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        if self.rate_mm_h == 0.0 {
            0.0
        } else {
            self.beta * self.rate_mm_h.powf(self.b_exp)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.rate_mm_h, self.beta, self.b_exp, self.sigma0_m, self.i_threshold];
        if vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("rain: parameters must be finite and >= 0".into()))
        }
    }
}

fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn along_ray(origin: [f64; 3], p: [f64; 4], r_old: f64, r_new: f64, intensity: f64) -> [f64; 4] {
    if r_old == 0.0 {
        return [p[0], p[1], p[2], intensity];
    }
    let s = r_new / r_old;
    [
        origin[0] + (p[0] - origin[0]) * s,
        origin[1] + (p[1] - origin[1]) * s,
        origin[2] + (p[2] - origin[2]) * s,
        intensity,
    ]
}

/// Attenuates every return; a return weaker than the fog backscatter at its
/// range becomes a soft fog point nearer along the same ray.
pub fn apply_fog(cloud: &PointCloud, params: &FogParams) -> PointCloud {
    if !params.enabled {
        return cloud.clone();
    }
    let mut points = Vec::with_capacity(cloud.len());
    let mut soft = Vec::with_capacity(cloud.len());
    for (i, &p) in cloud.points.iter().enumerate() {
        let r = cloud.range(i);
        let i_fog = attenuate(p[3], params.alpha_fog, r);
        let i_bck = params.backscatter(r);
        let (q, is_soft) = if i_bck > i_fog {
            let hi = r.min(params.fog_range_max_m);
            let lo = params.fog_range_min_m.min(hi);
            let u: f64 = point_rng(params.seed, i).gen();
            (along_ray(cloud.origin, p, r, lo + (hi - lo) * u, i_bck), true)
        } else {
            ([p[0], p[1], p[2], i_fog], cloud.is_soft(i))
        };
        if q[3] >= params.i_threshold {
            points.push(q);
            soft.push(is_soft);
        }
    }
    if cloud.soft.is_empty() && !soft.contains(&true) {
        soft.clear();
    }
    PointCloud {
        origin: cloud.origin,
        points,
        soft,
    }
}

/// Adds Gaussian range noise, attenuates, and drops returns below the
/// sensitivity threshold.
pub fn apply_rain(cloud: &PointCloud, params: &RainParams) -> PointCloud {
    let alpha = params.alpha();
    let noise = Normal::new(0.0, params.sigma0_m).ok();
    let mut points = Vec::with_capacity(cloud.len());
    let mut soft = Vec::new();
    for (i, &p) in cloud.points.iter().enumerate() {
        let r = cloud.range(i);
        let intensity = attenuate(p[3], alpha, r);
        if intensity < params.i_threshold {
            continue;
        }
        let eps = match noise {
            Some(n) if params.sigma0_m > 0.0 => n.sample(&mut point_rng(params.seed, i)),
            _ => 0.0,
        };
        points.push(if eps == 0.0 {
            [p[0], p[1], p[2], intensity]
        } else {
            along_ray(cloud.origin, p, r, (r + eps).max(0.0), intensity)
        });
        if !cloud.soft.is_empty() {
            soft.push(cloud.is_soft(i));
        }
    }
    PointCloud {
        origin: cloud.origin,
        points,
        soft,
    }
}

/// A named weather condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherPreset {
    pub format: String,
    pub name: String,
    #[serde(default)]
    pub fog: Option<FogParams>,
    #[serde(default)]
    pub rain: Option<RainParams>,
    /// Camera proxy: class channel is zeroed beyond this depth.
    #[serde(default)]
    pub camera_visibility_m: Option<f64>,
}

const BUILTIN: [(&str, &str); 3] = [
    ("sunny", include_str!("../presets/weather/sunny.json")),
    ("fog_heavy", include_str!("../presets/weather/fog_heavy.json")),
    ("rain_heavy", include_str!("../presets/weather/rain_heavy.json")),
];

impl WeatherPreset {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown weather preset `{name}`")))?;
        Self::parse(text, FsPath::new(name))
    }

    /// A built-in preset name or a path to a preset file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = FsPath::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &FsPath) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if p.format != WEATHER_FORMAT {
            return Err(Error::format(path, format!("expected format `{WEATHER_FORMAT}`, got `{}`", p.format)));
        }
        if let Some(f) = &p.fog {
            f.validate()?;
        }
        if let Some(r) = &p.rain {
            r.validate()?;
        }
        Ok(p)
    }

    /// Fog, then rain, with seeds mixed with `frame_seed`.
    pub fn apply_lidar(&self, cloud: &PointCloud, frame_seed: u64) -> PointCloud {
        let mut out = cloud.clone();
        if let Some(f) = &self.fog {
            let f = FogParams {
                seed: mix(f.seed, frame_seed),
                ..f.clone()
            };
            out = apply_fog(&out, &f);
        }
        if let Some(r) = &self.rain {
            let r = RainParams {
                seed: mix(r.seed, frame_seed),
                ..r.clone()
            };
            out = apply_rain(&out, &r);
        }
        out
    }

    pub fn apply_camera(&self, img: &ImageRaster, depth_ref_m: f64) -> ImageRaster {
        let mut out = img.clone();
        if let Some(vis) = self.camera_visibility_m {
            for px in out.data.chunks_exact_mut(2) {
                if px[0] <= 0.0 || depth_ref_m / px[0] > vis {
                    px[1] = 0.0;
                }
            }
        }
        out
    }
}

fn mix(a: u64, b: u64) -> u64 {
    crate::scene::splitmix64(a ^ b.rotate_left(32))
}

/// Mean intensity over the input points, counting dropped returns as zero.
pub fn mean_intensity(input_len: usize, output: &PointCloud) -> f64 {
    if input_len == 0 {
        return 0.0;
    }
    output.points.iter().map(|p| p[3]).sum::<f64>() / input_len as f64
}
