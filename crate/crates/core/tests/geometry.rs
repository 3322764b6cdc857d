use std::f64::consts::{FRAC_PI_2, PI};

use mmw_core::geometry::*;
fn corner_grid() -> BevGridSpec {
    BevGridSpec {
        height_cells: 4,
        width_cells: 4,
        cell_size_m: 1.0,
        origin_m: [0.0, -2.0],
        rsu_xy_m: [0.0, 0.0],
        rsu_heading_rad: 0.0,
    }
}

#[test]
fn center_angle_examples() {
    assert!((beam_center_angle(0, 64).unwrap() - (-63.0f64 / 64.0).asin()).abs() < 1e-15);
    assert!((beam_center_angle(0, 64).unwrap() + 1.39379).abs() < 1e-5);
    assert!((beam_center_angle(0, 4).unwrap() + 0.8481).abs() < 1e-4);
    for q in 0..64 {
        let a = beam_center_angle(q, 64).unwrap();
        let b = beam_center_angle(63 - q, 64).unwrap();
        assert!((a + b).abs() < 1e-12);
    }
    assert!(beam_center_angle(64, 64).is_err());
}

#[test]
fn sin_interval_examples() {
    assert_eq!(beam_sin_interval(0, 2).unwrap(), (-1.0, 0.0));
    assert_eq!(beam_sin_interval(31, 64).unwrap(), (-1.0 / 32.0, 0.0));
    let mut prev_hi = -1.0;
    for q in 0..64 {
        let (lo, hi) = beam_sin_interval(q, 64).unwrap();
        assert_eq!(lo, prev_hi);
        assert!((hi - lo - 2.0 / 64.0).abs() < 1e-15);
        prev_hi = hi;
    }
    assert_eq!(prev_hi, 1.0);
}

#[test]
fn half_width_grows_toward_endfire() {
    let mid = beam_half_width(32, 64).unwrap();
    let edge = beam_half_width(63, 64).unwrap();
    assert!(edge > 5.0 * mid);
    for q in 32..63 {
        assert!(beam_half_width(q + 1, 64).unwrap() > beam_half_width(q, 64).unwrap());
    }
}

#[test]
fn boresight_and_side_cells() {
    let spec = BevGridSpec {
        height_cells: 1,
        width_cells: 3,
        cell_size_m: 1.0,
        origin_m: [-1.5, 4.5],
        rsu_xy_m: [0.0, 0.0],
        rsu_heading_rad: FRAC_PI_2,
    };
    let g = bev_angle_grid(&spec).unwrap();
    assert!(g.at(0, 1).abs() < 1e-15);
    // heading +y; cell at -x is to the left
    assert!(g.at(0, 0) > 0.0 && g.at(0, 2) < 0.0);

    let side = BevGridSpec {
        height_cells: 1,
        width_cells: 1,
        cell_size_m: 1.0,
        origin_m: [-0.5, 4.5],
        rsu_xy_m: [0.0, 0.0],
        rsu_heading_rad: 0.0,
    };
    let g = bev_angle_grid(&side).unwrap();
    assert!((g.at(0, 0) - FRAC_PI_2).abs() < 1e-15);
    assert!(g.in_sector[0]);
}

#[test]
fn corner_grid_matches_scalar_atan2() {
    let spec = corner_grid();
    let g = bev_angle_grid(&spec).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let x = j as f64 + 0.5;
            let y = -2.0 + i as f64 + 0.5;
            assert!((g.at(i, j) - y.atan2(x)).abs() < 1e-15);
        }
    }
}

#[test]
fn degenerate_and_behind_cells() {
    let spec = BevGridSpec {
        height_cells: 1,
        width_cells: 2,
        cell_size_m: 2.0,
        origin_m: [-3.0, -1.0],
        rsu_xy_m: [-2.0, 0.0],
        rsu_heading_rad: PI,
    };
    let g = bev_angle_grid(&spec).unwrap();
    assert!(g.degenerate[0] && !g.in_sector[0] && g.theta[0] == 0.0);
    // second cell lies behind an RSU facing -x
    assert!(!g.in_sector[1]);
    assert!((g.theta[1] - PI).abs() < 1e-15);
}

#[test]
fn single_beam_mask_is_sector_indicator() {
    let g = bev_angle_grid(&corner_grid()).unwrap();
    let m = beam_mask(0, 1, &g).unwrap();
    let expected: Vec<u8> = g.in_sector.iter().map(|&b| u8::from(b)).collect();
    assert_eq!(m.bits, expected);
}

#[test]
fn two_beam_split_by_sign() {
    let spec = BevGridSpec {
        height_cells: 4,
        width_cells: 4,
        cell_size_m: 1.0,
        origin_m: [-2.0, 0.0],
        rsu_xy_m: [0.0, 0.0],
        rsu_heading_rad: FRAC_PI_2,
    };
    let g = bev_angle_grid(&spec).unwrap();
    let m0 = beam_mask(0, 2, &g).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            // beam 0 = negative sines = right of boresight = +x half
            let expect = u8::from(j >= 2);
            assert_eq!(m0.bits[i * 4 + j], expect, "cell ({i},{j})");
        }
    }
}

#[test]
fn apply_mask_examples() {
    let feats: Vec<f64> = (0..2 * 4).map(|v| v as f64 + 1.0).collect();
    let ones = BeamMask::filled(2, 2, 1);
    assert_eq!(apply_mask(&feats, 2, &ones).unwrap(), feats);
    let zeros = BeamMask::filled(2, 2, 0);
    assert!(apply_mask(&feats, 2, &zeros).unwrap().iter().all(|&v| v == 0.0));
    let m = BeamMask {
        rows: 2,
        cols: 2,
        bits: vec![1, 0, 0, 1],
    };
    let out = apply_mask(&feats, 2, &m).unwrap();
    assert_eq!(out, vec![1.0, 0.0, 0.0, 4.0, 5.0, 0.0, 0.0, 8.0]);
    assert_eq!(apply_mask(&out, 2, &m).unwrap(), out);
    assert!(apply_mask(&feats, 3, &m).is_err());
}

#[test]
fn center_angle_lands_in_own_mask() {
    let spec = BevGridSpec {
        height_cells: 64,
        width_cells: 128,
        cell_size_m: 0.5,
        origin_m: [-32.0, 0.0],
        rsu_xy_m: [0.0, 0.0],
        rsu_heading_rad: FRAC_PI_2,
    };
    let g = bev_angle_grid(&spec).unwrap();
    let q_count = 16;
    for q in 0..q_count {
        let phi = beam_center_angle(q, q_count).unwrap();
        // point at range 20 m along the beam centre
        let (s, c) = (spec.rsu_heading_rad + phi).sin_cos();
        let (i, j) = spec.cell_of(20.0 * c, 20.0 * s).unwrap();
        let mask = beam_mask(q, q_count, &g).unwrap();
        // the containing cell's centre can straddle a boundary only for
        // very wide cells; at 0.5 m and 20 m range it stays inside
        assert_eq!(mask.bits[i * spec.width_cells + j], 1, "beam {q}");
        assert_eq!(beam_for_sin(phi.sin(), q_count), q);
    }
}
