use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

use super::trace::{ray_box, ray_wall, RayHit};
use super::{BoxObstacle, Scenario};

pub const CLASS_SKY: u8 = 0;
pub const CLASS_GROUND: u8 = 1;
pub const CLASS_WALL: u8 = 2;
pub const CLASS_VEHICLE: u8 = 3;

/// LiDAR and camera mounted on the RSU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    pub lidar_channels: usize,
    pub lidar_azimuth_steps: usize,
    /// Azimuth coverage centred on the RSU heading.
    pub lidar_azimuth_fov_deg: f64,
    pub lidar_points_cap: usize,
    pub lidar_range_m: f64,
    pub lidar_vfov_deg: [f64; 2],
    /// Range at which a return saturates at intensity 1.
    pub intensity_ref_m: f64,
    /// `[height, width]` in pixels.
    pub cam_resolution: [usize; 2],
    pub cam_hfov_deg: f64,
    pub cam_pitch_deg: f64,
    /// Depth mapped to inverse-depth value 1.
    pub cam_depth_ref_m: f64,
    pub period_s: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            lidar_channels: 16,
            lidar_azimuth_steps: 128,
            lidar_azimuth_fov_deg: 180.0,
            lidar_points_cap: 2048,
            lidar_range_m: 120.0,
            lidar_vfov_deg: [-25.0, -5.0],
            intensity_ref_m: 12.0,
            cam_resolution: [32, 32],
            cam_hfov_deg: 110.0,
            cam_pitch_deg: -20.0,
            cam_depth_ref_m: 5.0,
            period_s: 0.1,
        }
    }
}

impl SensorSpec {
    /// Sensor period in channel ticks; must be a positive integer multiple.
    pub fn period_ticks(&self, tick_s: f64) -> Result<usize> {
        let ratio = self.period_s / tick_s;
        let j = ratio.round();
        if !(j >= 1.0) || (ratio - j).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "sensor period {} s is not an integer multiple of tick {} s",
                self.period_s, tick_s
            )));
        }
        Ok(j as usize)
    }
}

/// Points as `(x, y, z, intensity)` in world coordinates, captured from
/// `origin`. `soft` flags fog returns and is either empty or one per point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub origin: [f64; 3],
    #[serde(serialize_with = "flat_points", deserialize_with = "unflat_points")]
    pub points: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub soft: Vec<bool>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn range(&self, i: usize) -> f64 {
        let p = self.points[i];
        ((p[0] - self.origin[0]).powi(2) + (p[1] - self.origin[1]).powi(2) + (p[2] - self.origin[2]).powi(2)).sqrt()
    }

    pub fn is_soft(&self, i: usize) -> bool {
        self.soft.get(i).copied().unwrap_or(false)
    }
}

fn flat_points<S: Serializer>(pts: &[[f64; 4]], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(pts.iter().flatten())
}

fn unflat_points<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<[f64; 4]>, D::Error> {
    let flat = Vec::<f64>::deserialize(d)?;
    if flat.len() % 4 != 0 {
        return Err(serde::de::Error::custom("point array length is not a multiple of 4"));
    }
    Ok(flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

/// `height x width x 2` raster, channels last: inverse depth, then class id
/// scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageRaster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn inv_depth(&self, r: usize, c: usize) -> f64 {
        self.data[(r * self.width + c) * 2]
    }

    pub fn class(&self, r: usize, c: usize) -> u8 {
        (self.data[(r * self.width + c) * 2 + 1] * f64::from(CLASS_VEHICLE)).round() as u8
    }
}

fn round_to(x: f64, scale: f64) -> f64 {
    (x * scale).round() / scale
}

fn cast(o: [f64; 3], d: [f64; 3], boxes: &[BoxObstacle], sc: &Scenario) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    let mut offer = |t: f64, class: u8| {
        if t > 1e-9 && best.map_or(true, |b| t < b.t) {
            best = Some(RayHit { t, class });
        }
    };
    if d[2] < 0.0 {
        offer(-o[2] / d[2], CLASS_GROUND);
    }
    for b in boxes {
        if let Some((t0, _)) = ray_box(o, d, b) {
            offer(t0, CLASS_VEHICLE);
        }
    }
    for w in &sc.walls {
        if let Some(t) = ray_wall(o, d, w) {
            offer(t, CLASS_WALL);
        }
    }
    best
}

fn visible_boxes(sc: &Scenario, t_index: usize) -> Vec<BoxObstacle> {
    let mut boxes = sc.obstacles(t_index);
    boxes.push(sc.ego_box(t_index));
    boxes
}

/// Ray-cast LiDAR scan from the RSU. Returns are kept within range, with
/// intensity `min(1, (R_ref / R)^2)`; coordinates are rounded to 1 mm.
pub fn render_lidar(sc: &Scenario, t_index: usize, spec: &SensorSpec) -> PointCloud {
    let boxes = visible_boxes(sc, t_index);
    let origin = [sc.rsu.xy[0], sc.rsu.xy[1], sc.rsu_height_m];
    let mut points = Vec::new();
    let (ch, steps) = (spec.lidar_channels, spec.lidar_azimuth_steps);
    let fov = spec.lidar_azimuth_fov_deg.to_radians();
    let [el_lo, el_hi] = spec.lidar_vfov_deg.map(f64::to_radians);
    'scan: for c in 0..ch {
        let el = if ch == 1 {
            el_lo
        } else {
            el_lo + (el_hi - el_lo) * c as f64 / (ch - 1) as f64
        };
        for a in 0..steps {
            if points.len() >= spec.lidar_points_cap {
                break 'scan;
            }
            let az = sc.rsu.heading_rad + fov / 2.0 - fov * (a as f64 + 0.5) / steps as f64;
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some(hit) = cast(origin, d, &boxes, sc) else { continue };
            if hit.t > spec.lidar_range_m {
                continue;
            }
            let intensity = (spec.intensity_ref_m / hit.t).powi(2).min(1.0);
            points.push([
                round_to(origin[0] + hit.t * d[0], 1e3),
                round_to(origin[1] + hit.t * d[1], 1e3),
                round_to(origin[2] + hit.t * d[2], 1e3),
                round_to(intensity, 1e5),
            ]);
        }
    }
    PointCloud {
        origin,
        points,
        soft: Vec::new(),
    }
}

/// Pinhole depth/class raster from the RSU camera.
pub fn render_camera(sc: &Scenario, t_index: usize, spec: &SensorSpec) -> ImageRaster {
    let boxes = visible_boxes(sc, t_index);
    let [h, w] = spec.cam_resolution;
    let mut img = ImageRaster::zeros(h, w);
    let origin = [sc.rsu.xy[0], sc.rsu.xy[1], sc.rsu_height_m];
    let (fwd, left) = (sc.rsu.forward(), sc.rsu.left());
    let (sp, cp) = spec.cam_pitch_deg.to_radians().sin_cos();
    let f3 = [cp * fwd[0], cp * fwd[1], sp];
    let up = [-sp * fwd[0], -sp * fwd[1], cp];
    let focal = (w as f64 / 2.0) / (spec.cam_hfov_deg.to_radians() / 2.0).tan();
    for r in 0..h {
        let yc = r as f64 + 0.5 - h as f64 / 2.0;
        for c in 0..w {
            let xc = c as f64 + 0.5 - w as f64 / 2.0;
            let d: [f64; 3] =
                std::array::from_fn(|k| focal * f3[k] - xc * [left[0], left[1], 0.0][k] - yc * up[k]);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = d.map(|v| v / norm);
            if let Some(hit) = cast(origin, d, &boxes, sc) {
                let i = (r * w + c) * 2;
                img.data[i] = round_to((spec.cam_depth_ref_m / hit.t).min(1.0), 1e4);
                img.data[i + 1] = round_to(f64::from(hit.class) / f64::from(CLASS_VEHICLE), 1e4);
            }
        }
    }
    img
}
