use std::f64::consts::PI;

use crate::phy::{ArrayConfig, Path, C64, SPEED_OF_LIGHT};

use super::{BoxObstacle, Pose, Scenario, Wall};

const EPS: f64 = 1e-9;

/// Nearest intersection along a ray with its object class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub class: u8,
}

/// Entry and exit parameters of the ray `o + t d` through an upright box.
pub(crate) fn ray_box(o: [f64; 3], d: [f64; 3], b: &BoxObstacle) -> Option<(f64, f64)> {
    let (s, c) = b.yaw_rad.sin_cos();
    let (rx, ry) = (o[0] - b.center[0], o[1] - b.center[1]);
    let lo = [rx * c + ry * s, -rx * s + ry * c, o[2]];
    let ld = [d[0] * c + d[1] * s, -d[0] * s + d[1] * c, d[2]];
    let mins = [-b.half[0], -b.half[1], 0.0];
    let maxs = [b.half[0], b.half[1], b.height_m];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if ld[k].abs() < 1e-15 {
            if lo[k] < mins[k] || lo[k] > maxs[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut b2) = ((mins[k] - lo[k]) / ld[k], (maxs[k] - lo[k]) / ld[k]);
        if a > b2 {
            std::mem::swap(&mut a, &mut b2);
        }
        t0 = t0.max(a);
        t1 = t1.min(b2);
    }
    (t0 <= t1).then_some((t0, t1))
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Parameter `t > 0` where the ray meets the wall face, if within its height.
pub(crate) fn ray_wall(o: [f64; 3], d: [f64; 3], w: &Wall) -> Option<f64> {
    let e = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
    let den = cross([d[0], d[1]], e);
    if den.abs() < 1e-15 {
        return None;
    }
    let ao = [w.a[0] - o[0], w.a[1] - o[1]];
    let t = cross(ao, e) / den;
    let u = cross(ao, [d[0], d[1]]) / den;
    let z = o[2] + t * d[2];
    (t > 0.0 && (0.0..=1.0).contains(&u) && (0.0..=w.height_m).contains(&z)).then_some(t)
}

/// True when the open segment `p -> q` passes through the box.
pub fn segment_hits_box(p: [f64; 3], q: [f64; 3], b: &BoxObstacle) -> bool {
    let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
    matches!(ray_box(p, d, b), Some((t0, t1)) if t0 < 1.0 - EPS && t1 > EPS)
}

fn segment_blocked(p: [f64; 3], q: [f64; 3], boxes: &[BoxObstacle], walls: &[Wall], skip: Option<usize>) -> bool {
    if boxes.iter().any(|b| segment_hits_box(p, q, b)) {
        return true;
    }
    let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
    walls
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .any(|(_, w)| matches!(ray_wall(p, d, w), Some(t) if t > EPS && t < 1.0 - EPS))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn make_path(length: f64, coeff: f64, lambda: f64, aod: f64, aoa: f64) -> Path {
    let amp = coeff * lambda / (4.0 * PI * length);
    Path {
        gain: C64::from_polar(amp, -2.0 * PI * (length / lambda).rem_euclid(1.0)),
        delay_s: length / SPEED_OF_LIGHT,
        aod_rad: aod,
        aoa_rad: aoa,
    }
}

/// LOS plus one specular reflection per wall for a user at `user`.
///
/// Angles are planar bearings: departure relative to the RSU heading,
/// arrival relative to the user heading, both positive to the left.
/// Lengths and delays are three-dimensional.
pub fn trace_paths_at(sc: &Scenario, user: &Pose, boxes: &[BoxObstacle], cfg: &ArrayConfig) -> Vec<Path> {
    let lambda = cfg.wavelength_m();
    let tx = [sc.rsu.xy[0], sc.rsu.xy[1], sc.rsu_height_m];
    let rx = [user.xy[0], user.xy[1], sc.user_height_m];
    let mut paths = Vec::new();
    if !segment_blocked(tx, rx, boxes, &sc.walls, None) {
        let aod = sc.rsu.bearing([rx[0] - tx[0], rx[1] - tx[1]]);
        let aoa = user.bearing([tx[0] - rx[0], tx[1] - rx[1]]);
        paths.push(make_path(dist3(tx, rx), 1.0, lambda, aod, aoa));
    }
    for (wi, w) in sc.walls.iter().enumerate() {
        let e = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        if len2 == 0.0 {
            continue;
        }
        // Both ends must face the same side of the wall.
        let side = |p: [f64; 3]| cross(e, [p[0] - w.a[0], p[1] - w.a[1]]);
        let (st, sr) = (side(tx), side(rx));
        if st * sr <= 0.0 {
            continue;
        }
        // Mirror the RSU across the wall line.
        let ap = [tx[0] - w.a[0], tx[1] - w.a[1]];
        let proj = (ap[0] * e[0] + ap[1] * e[1]) / len2;
        let foot = [w.a[0] + proj * e[0], w.a[1] + proj * e[1]];
        let image = [2.0 * foot[0] - tx[0], 2.0 * foot[1] - tx[1], tx[2]];
        let d = [rx[0] - image[0], rx[1] - image[1], rx[2] - image[2]];
        let Some(t) = ray_wall(image, d, w) else { continue };
        if t >= 1.0 {
            continue;
        }
        let hit = [image[0] + t * d[0], image[1] + t * d[1], image[2] + t * d[2]];
        if segment_blocked(tx, hit, boxes, &sc.walls, Some(wi))
            || segment_blocked(hit, rx, boxes, &sc.walls, Some(wi))
        {
            continue;
        }
        let aod = sc.rsu.bearing([hit[0] - tx[0], hit[1] - tx[1]]);
        let aoa = user.bearing([hit[0] - rx[0], hit[1] - rx[1]]);
        paths.push(make_path(dist3(image, rx), sc.reflection_coeff, lambda, aod, aoa));
    }
    paths
}

/// Paths between the RSU and the ego vehicle at tick `t_index`. Every
/// other vehicle and structure can occlude.
pub fn trace_paths(sc: &Scenario, t_index: usize, cfg: &ArrayConfig) -> Vec<Path> {
    trace_paths_at(sc, &sc.ego_pose(t_index), &sc.obstacles(t_index), cfg)
}
