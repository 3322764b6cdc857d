//! Beam index to angle mapping and beam-guided masking of the BEV grid.
//!
//! Beam `q` of a `Q`-beam codebook covers the half-open sine interval
//! `[2q/Q - 1, 2(q+1)/Q - 1)`; the last beam also owns `sin = 1` so that the
//! intervals tile `[-1, 1]` without gaps. Membership is tested in sine space,
//! which avoids an `asin` per cell per beam.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevGridSpec {
    /// Rows (`i`, along world y).
    pub height_cells: usize,
    /// Columns (`j`, along world x).
    pub width_cells: usize,
    pub cell_size_m: f64,
    /// World coordinates of the outer corner of cell (0, 0).
    pub origin_m: [f64; 2],
    pub rsu_xy_m: [f64; 2],
    pub rsu_heading_rad: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            height_cells: 16,
            width_cells: 32,
            cell_size_m: 2.0,
            origin_m: [-32.0, 0.0],
            rsu_xy_m: [0.0, 0.0],
            rsu_heading_rad: FRAC_PI_2,
        }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height_cells == 0 || self.width_cells == 0 || !(self.cell_size_m > 0.0) {
            return Err(Error::InvalidArgument(
                "BEV grid needs >= 1 cell per axis and a positive cell size".into(),
            ));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin_m[0] + (j as f64 + 0.5) * self.cell_size_m,
            self.origin_m[1] + (i as f64 + 0.5) * self.cell_size_m,
        ]
    }

    /// Cell containing world point `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fj = (x - self.origin_m[0]) / self.cell_size_m;
        let fi = (y - self.origin_m[1]) / self.cell_size_m;
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.height_cells && j < self.width_cells).then_some((i, j))
    }

    /// Heading-relative (forward, left) coordinates of a world point.
    pub fn to_rsu_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.rsu_xy_m[0], y - self.rsu_xy_m[1]);
        let (s, c) = self.rsu_heading_rad.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }
}

/// Signed cell-centre angles relative to the RSU boresight (positive to the
/// left), with their sines and sector flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleGrid {
    pub rows: usize,
    pub cols: usize,
    pub theta: Vec<f64>,
    pub sin_theta: Vec<f64>,
    pub in_sector: Vec<bool>,
    /// Cell centre coincides with the RSU position.
    pub degenerate: Vec<bool>,
}

impl AngleGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.theta[i * self.cols + j]
    }
}

pub fn bev_angle_grid(spec: &BevGridSpec) -> Result<AngleGrid> {
    spec.validate()?;
    let n = spec.n_cells();
    let mut g = AngleGrid {
        rows: spec.height_cells,
        cols: spec.width_cells,
        theta: Vec::with_capacity(n),
        sin_theta: Vec::with_capacity(n),
        in_sector: Vec::with_capacity(n),
        degenerate: Vec::with_capacity(n),
    };
    for i in 0..spec.height_cells {
        for j in 0..spec.width_cells {
            let [x, y] = spec.cell_center(i, j);
            let (fwd, left) = spec.to_rsu_frame(x, y);
            let r = fwd.hypot(left);
            if r < 1e-12 {
                g.theta.push(0.0);
                g.sin_theta.push(0.0);
                g.in_sector.push(false);
                g.degenerate.push(true);
                continue;
            }
            let mut th = left.atan2(fwd);
            if th <= -PI {
                th = PI;
            }
            g.theta.push(th);
            g.sin_theta.push(left / r);
            g.in_sector.push(th.abs() <= FRAC_PI_2);
            g.degenerate.push(false);
        }
    }
    Ok(g)
}

fn check_beam(q: usize, q_count: usize) -> Result<()> {
    if q >= q_count {
        return Err(Error::OutOfRange {
            index: q,
            size: q_count,
        });
    }
    Ok(())
}

/// Pointing angle of beam `q`: `asin(2(q + 0.5)/Q - 1)`.
pub fn beam_center_angle(q: usize, q_count: usize) -> Result<f64> {
    check_beam(q, q_count)?;
    Ok((2.0 * (q as f64 + 0.5) / q_count as f64 - 1.0).asin())
}

/// Sine-space coverage `[lo, hi)` of beam `q`, width exactly `2/Q`.
pub fn beam_sin_interval(q: usize, q_count: usize) -> Result<(f64, f64)> {
    check_beam(q, q_count)?;
    let qf = q_count as f64;
    Ok((2.0 * q as f64 / qf - 1.0, 2.0 * (q + 1) as f64 / qf - 1.0))
}

/// Angular half-width of beam `q` (half the arcsine image of its interval).
pub fn beam_half_width(q: usize, q_count: usize) -> Result<f64> {
    let (lo, hi) = beam_sin_interval(q, q_count)?;
    Ok((hi.min(1.0).asin() - lo.asin()) / 2.0)
}

fn interval_contains(q: usize, q_count: usize, lo: f64, hi: f64, s: f64) -> bool {
    s >= lo && (s < hi || (q + 1 == q_count && s <= 1.0))
}

/// Beam whose interval contains `sin_value` (clamped to `[-1, 1]`).
pub fn beam_for_sin(sin_value: f64, q_count: usize) -> usize {
    let s = sin_value.clamp(-1.0, 1.0);
    let idx = ((s + 1.0) * q_count as f64 / 2.0).floor() as usize;
    idx.min(q_count - 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeamMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u8>,
}

impl BeamMask {
    pub fn filled(rows: usize, cols: usize, bit: u8) -> Self {
        Self {
            rows,
            cols,
            bits: vec![bit; rows * cols],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Binary PGM, one byte per cell (0 or 255), row 0 first.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b == 1 { 255 } else { 0 }).collect();
        write_pgm(path, self.cols, self.rows, &bytes)
    }
}

pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Mask of the in-sector cells whose sine falls in beam `q`'s interval.
pub fn beam_mask(q: usize, q_count: usize, grid: &AngleGrid) -> Result<BeamMask> {
    let (lo, hi) = beam_sin_interval(q, q_count)?;
    let bits = grid
        .sin_theta
        .iter()
        .zip(&grid.in_sector)
        .map(|(&s, &ok)| u8::from(ok && interval_contains(q, q_count, lo, hi, s)))
        .collect();
    Ok(BeamMask {
        rows: grid.rows,
        cols: grid.cols,
        bits,
    })
}

/// Gates every feature vector of a `C x H x W` map with the mask bit of its cell.
pub fn apply_mask(features: &[f64], channels: usize, mask: &BeamMask) -> Result<Vec<f64>> {
    let hw = mask.rows * mask.cols;
    if features.len() != channels * hw {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "{} features vs {channels}x{}x{}",
                features.len(),
                mask.rows,
                mask.cols
            ),
        ));
    }
    let mut out = features.to_vec();
    for c in 0..channels {
        for (v, &b) in out[c * hw..(c + 1) * hw].iter_mut().zip(&mask.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
