//! Scripted urban scenes observed by a roadside unit (RSU): first-order
//! path tracing, LiDAR and camera synthesis, and labelled trajectory
//! datasets.

mod dataset;
mod sensors;
mod trace;

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    frame_seed, gen_dataset, generate_trajectory, label_frame, load_dataset, read_frames, splitmix64,
    trajectory_seed, CodebookConfig, Dataset,
    FrameRecord, GenConfig, Manifest, Split, SplitCounts, TrajectoryData, TrajectoryEntry,
    DATASET_FORMAT, GEN_CONFIG_FORMAT,
};
pub use sensors::{render_camera, render_lidar, ImageRaster, PointCloud, SensorSpec, CLASS_GROUND, CLASS_SKY, CLASS_VEHICLE, CLASS_WALL};
pub use trace::{segment_hits_box, trace_paths, trace_paths_at, RayHit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    StraightRoad,
    CurvyRoad,
    Intersection,
}

impl Template {
    pub const ALL: [Template; 3] = [Self::StraightRoad, Self::CurvyRoad, Self::Intersection];

    pub fn name(self) -> &'static str {
        match self {
            Self::StraightRoad => "straight_road",
            Self::CurvyRoad => "curvy_road",
            Self::Intersection => "intersection",
        }
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// Knobs of [`build_scenario`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub template: String,
    /// Oncoming vehicles per 100 m of road.
    pub traffic_density: f64,
    /// Upper bound on parked trucks between the RSU and the ego lane.
    pub max_parked_trucks: usize,
    pub duration_s: f64,
    pub tick_s: f64,
    pub rsu_height_m: f64,
    pub user_height_m: f64,
    pub reflection_coeff: f64,
    pub cruise_speed_mps: [f64; 2],
    pub stop_probability: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            template: "straight_road".into(),
            traffic_density: 3.0,
            max_parked_trucks: 2,
            duration_s: 8.0,
            tick_s: 0.01,
            rsu_height_m: 6.0,
            user_height_m: 1.5,
            reflection_coeff: 0.5,
            cruise_speed_mps: [5.0, 9.0],
            stop_probability: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub xy: [f64; 2],
    pub heading_rad: f64,
}

impl Pose {
    pub fn forward(&self) -> [f64; 2] {
        [self.heading_rad.cos(), self.heading_rad.sin()]
    }

    /// Unit vector to the left of the heading; array axis of a broadside ULA.
    pub fn left(&self) -> [f64; 2] {
        [-self.heading_rad.sin(), self.heading_rad.cos()]
    }

    /// Signed planar angle of `dir` from the heading, positive to the left.
    pub fn bearing(&self, dir: [f64; 2]) -> f64 {
        let (f, l) = (self.forward(), self.left());
        (dir[0] * l[0] + dir[1] * l[1]).atan2(dir[0] * f[0] + dir[1] * f[1])
    }
}

/// Vertical reflecting facade between two planar points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub height_m: f64,
}

/// Upright box standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub center: [f64; 2],
    /// Half extents along and across `yaw_rad`.
    pub half: [f64; 2],
    pub height_m: f64,
    pub yaw_rad: f64,
}

/// Planar polyline parameterised by arc length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<[f64; 2]>> for Polyline {
    type Error = Error;

    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<Polyline> for Vec<[f64; 2]> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("polyline needs two points".into()));
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    /// Pose at arc length `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let seg = match self.cumulative.partition_point(|&c| c <= s) {
            0 => 0,
            i => (i - 1).min(self.points.len() - 2),
        };
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let u = if len > 0.0 { (s - self.cumulative[seg]) / len } else { 0.0 };
        Pose {
            xy: [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])],
            heading_rad: (b[1] - a[1]).atan2(b[0] - a[0]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Cruise,
    Decelerate,
    Stop,
    Accelerate,
}

/// Linear speed ramp from `v0` to `v1` over `[t0, t1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedSegment {
    pub kind: SegmentKind,
    pub t0: f64,
    pub t1: f64,
    pub v0: f64,
    pub v1: f64,
}

/// Path plus speed profile; the vehicle starts at `s_start` along the path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    pub path: Polyline,
    pub s_start: f64,
    pub segments: Vec<SpeedSegment>,
}

impl EgoTrajectory {
    /// Distance travelled by time `t`.
    pub fn distance(&self, t: f64) -> f64 {
        let mut s = 0.0;
        for seg in &self.segments {
            if t <= seg.t0 {
                break;
            }
            let dt = t.min(seg.t1) - seg.t0;
            let span = seg.t1 - seg.t0;
            let a = if span > 0.0 { (seg.v1 - seg.v0) / span } else { 0.0 };
            s += seg.v0 * dt + 0.5 * a * dt * dt;
        }
        s
    }

    pub fn speed(&self, t: f64) -> f64 {
        self.segments
            .iter()
            .find(|s| t >= s.t0 && t < s.t1)
            .or(self.segments.last())
            .map_or(0.0, |s| {
                let span = s.t1 - s.t0;
                let u = if span > 0.0 { ((t - s.t0) / span).clamp(0.0, 1.0) } else { 0.0 };
                s.v0 + u * (s.v1 - s.v0)
            })
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.path.at(self.s_start + self.distance(t))
    }
}

/// Oncoming vehicle moving at constant speed along a lane, wrapping around
/// the lane ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    pub lane: Polyline,
    pub s0: f64,
    pub speed_mps: f64,
    pub size: [f64; 3],
}

impl Mover {
    pub fn obstacle(&self, t: f64) -> BoxObstacle {
        let len = self.lane.length();
        let s = (self.s0 + self.speed_mps * t).rem_euclid(len);
        let pose = self.lane.at(s);
        BoxObstacle {
            center: pose.xy,
            half: [self.size[0] / 2.0, self.size[1] / 2.0],
            height_m: self.size[2],
            yaw_rad: pose.heading_rad,
        }
    }
}

/// Ego vehicle footprint (length, width, height).
pub const EGO_SIZE: [f64; 3] = [4.5, 1.8, 1.5];
const TRUCK_SIZE: [f64; 3] = [8.0, 2.5, 4.0];
const CAR_SIZE: [f64; 3] = [4.5, 1.8, 1.5];
const ROAD_HALF_LENGTH: f64 = 45.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub template: Template,
    pub seed: u64,
    pub rsu: Pose,
    pub rsu_height_m: f64,
    pub user_height_m: f64,
    pub reflection_coeff: f64,
    pub walls: Vec<Wall>,
    /// Static obstacles (parked trucks).
    pub blockers: Vec<BoxObstacle>,
    pub traffic: Vec<Mover>,
    pub ego: EgoTrajectory,
    pub duration_s: f64,
    pub tick_s: f64,
    /// Planar bounds `[x_min, y_min, x_max, y_max]` the ego stays inside.
    pub bounds: [f64; 4],
}

impl Scenario {
    pub fn n_ticks(&self) -> usize {
        (self.duration_s / self.tick_s).round() as usize
    }

    pub fn time(&self, t_index: usize) -> f64 {
        t_index as f64 * self.tick_s
    }

    pub fn ego_pose(&self, t_index: usize) -> Pose {
        self.ego.pose(self.time(t_index))
    }

    pub fn ego_box(&self, t_index: usize) -> BoxObstacle {
        let p = self.ego_pose(t_index);
        BoxObstacle {
            center: p.xy,
            half: [EGO_SIZE[0] / 2.0, EGO_SIZE[1] / 2.0],
            height_m: EGO_SIZE[2],
            yaw_rad: p.heading_rad,
        }
    }

    /// Every box present at `t_index` other than the ego vehicle.
    pub fn obstacles(&self, t_index: usize) -> Vec<BoxObstacle> {
        let t = self.time(t_index);
        let mut out = self.blockers.clone();
        out.extend(self.traffic.iter().map(|m| m.obstacle(t)));
        out
    }
}

fn straight(y: f64, reverse: bool) -> Polyline {
    let (a, b) = ([-ROAD_HALF_LENGTH, y], [ROAD_HALF_LENGTH, y]);
    Polyline::new(if reverse { vec![b, a] } else { vec![a, b] }).expect("two points")
}

fn sampled(f: impl Fn(f64) -> f64, reverse: bool) -> Polyline {
    let n = 180;
    let mut pts: Vec<[f64; 2]> = (0..=n)
        .map(|i| {
            let x = -ROAD_HALF_LENGTH + 2.0 * ROAD_HALF_LENGTH * i as f64 / n as f64;
            [x, f(x)]
        })
        .collect();
    if reverse {
        pts.reverse();
    }
    Polyline::new(pts).expect("sampled road")
}

fn speed_profile<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<SpeedSegment> {
    let [lo, hi] = cfg.cruise_speed_mps;
    let v = rng.gen_range(lo..=hi.max(lo));
    let total = cfg.duration_s;
    let seg = |kind, t0: f64, t1: f64, v0, v1| SpeedSegment { kind, t0, t1, v0, v1 };
    if total < 6.0 || !rng.gen_bool(cfg.stop_probability.clamp(0.0, 1.0)) {
        let v_start = v * rng.gen_range(0.6..=1.0);
        let t_acc = rng.gen_range(0.5..=2.0f64).min(total);
        return vec![
            seg(SegmentKind::Accelerate, 0.0, t_acc, v_start, v),
            seg(SegmentKind::Cruise, t_acc, total, v, v),
        ];
    }
    let t_dec = rng.gen_range(0.5..=(total - 5.0).max(0.5));
    let dec = rng.gen_range(1.0..=2.0);
    let hold = rng.gen_range(0.5..=1.5);
    let acc = rng.gen_range(1.5..=2.5);
    let t_stop = t_dec + dec;
    let t_go = t_stop + hold;
    let t_cruise = (t_go + acc).min(total);
    vec![
        seg(SegmentKind::Cruise, 0.0, t_dec, v, v),
        seg(SegmentKind::Decelerate, t_dec, t_stop, v, 0.0),
        seg(SegmentKind::Stop, t_stop, t_go, 0.0, 0.0),
        seg(SegmentKind::Accelerate, t_go, t_cruise, 0.0, v),
        seg(SegmentKind::Cruise, t_cruise, total.max(t_cruise), v, v),
    ]
}

/// Builds a deterministic scenario for `(config, seed)`.
pub fn build_scenario(cfg: &SceneConfig, seed: u64) -> Result<Scenario> {
    let template: Template = cfg.template.parse()?;
    if !(cfg.tick_s > 0.0) || !(cfg.duration_s > 0.0) {
        return Err(Error::InvalidArgument("tick and duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane_y = rng.gen_range(9.0..=12.0);
    let facade_y = rng.gen_range(24.0..=28.0);
    let mut walls = Vec::new();
    let (ego_path, opposite) = match template {
        Template::StraightRoad => {
            walls.push(Wall {
                a: [-60.0, facade_y],
                b: [60.0, facade_y],
                height_m: 15.0,
            });
            (straight(lane_y, false), straight(lane_y + 3.5, true))
        }
        Template::CurvyRoad => {
            walls.push(Wall {
                a: [-60.0, facade_y + 2.0],
                b: [60.0, facade_y + 2.0],
                height_m: 15.0,
            });
            let amp = rng.gen_range(2.0..=3.0);
            let wavelength = rng.gen_range(40.0..=60.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let y0 = lane_y + amp - 1.0;
            let f = move |x: f64| y0 + amp * (2.0 * PI * x / wavelength + phase).sin();
            (sampled(f, false), sampled(move |x| f(x) + 3.5, true))
        }
        Template::Intersection => {
            let x_turn = rng.gen_range(-6.0..=8.0);
            let r = 6.0;
            let gap = r + 4.0;
            walls.push(Wall {
                a: [-60.0, facade_y],
                b: [x_turn - gap, facade_y],
                height_m: 15.0,
            });
            walls.push(Wall {
                a: [x_turn + gap, facade_y],
                b: [60.0, facade_y],
                height_m: 15.0,
            });
            let mut pts = vec![[-ROAD_HALF_LENGTH, lane_y], [x_turn - r, lane_y]];
            for i in 1..=12 {
                let a = -FRAC_PI_2 + FRAC_PI_2 * i as f64 / 12.0;
                pts.push([x_turn - r + r * a.cos(), lane_y + r + r * a.sin()]);
            }
            pts.push([x_turn, 45.0]);
            let path = Polyline::new(pts)?;
            (path, straight(lane_y + 3.5, true))
        }
    };
    let segments = speed_profile(cfg, &mut rng);
    let mut ego = EgoTrajectory {
        path: ego_path,
        s_start: 0.0,
        segments,
    };
    let travelled = ego.distance(cfg.duration_s);
    let slack = (ego.path.length() - travelled).max(0.0);
    ego.s_start = match template {
        // Centre the motion on the RSU boresight.
        Template::StraightRoad | Template::CurvyRoad => slack / 2.0,
        Template::Intersection => slack * rng.gen_range(0.3..=0.6),
    };

    let mut blockers = Vec::new();
    let n_trucks = rng.gen_range(0..=cfg.max_parked_trucks);
    let truck_y = match template {
        Template::CurvyRoad => (lane_y - 4.0).max(4.0),
        _ => lane_y - 4.5,
    };
    let mut slots: Vec<f64> = Vec::new();
    for _ in 0..n_trucks * 8 {
        if slots.len() == n_trucks {
            break;
        }
        let x = rng.gen_range(-24.0..=24.0);
        if slots.iter().all(|s| (s - x).abs() > TRUCK_SIZE[0] + 2.0) {
            slots.push(x);
        }
    }
    for x in slots {
        blockers.push(BoxObstacle {
            center: [x, truck_y],
            half: [TRUCK_SIZE[0] / 2.0, TRUCK_SIZE[1] / 2.0],
            height_m: TRUCK_SIZE[2],
            yaw_rad: 0.0,
        });
    }

    let lane_len = opposite.length();
    let expected = cfg.traffic_density.max(0.0) * lane_len / 100.0;
    let n_cars = expected.floor() as usize + usize::from(rng.gen_bool(expected.fract()));
    let traffic = (0..n_cars)
        .map(|i| Mover {
            lane: opposite.clone(),
            s0: (i as f64 + rng.gen_range(0.0..0.6)) * lane_len / n_cars as f64,
            speed_mps: rng.gen_range(6.0..=11.0),
            size: CAR_SIZE,
        })
        .collect();

    Ok(Scenario {
        template,
        seed,
        rsu: Pose {
            xy: [0.0, 0.0],
            heading_rad: FRAC_PI_2,
        },
        rsu_height_m: cfg.rsu_height_m,
        user_height_m: cfg.user_height_m,
        reflection_coeff: cfg.reflection_coeff,
        walls,
        blockers,
        traffic,
        ego,
        duration_s: cfg.duration_s,
        tick_s: cfg.tick_s,
        bounds: [-ROAD_HALF_LENGTH, 0.0, ROAD_HALF_LENGTH, 45.0],
    })
}
