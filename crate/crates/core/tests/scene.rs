use mmw_core::geometry::beam_sin_interval;
use mmw_core::phy::{ArrayConfig, SPEED_OF_LIGHT};
use mmw_core::scene::{
    build_scenario, gen_dataset, label_frame, load_dataset, render_camera, render_lidar, trace_paths_at,
    BoxObstacle, Dataset, GenConfig, Polyline, Pose, Scenario, SceneConfig, SegmentKind, SensorSpec, Split,
    SplitCounts, Wall, CLASS_VEHICLE,
};

fn cfg(template: &str) -> SceneConfig {
    SceneConfig {
        template: template.into(),
        ..SceneConfig::default()
    }
}

/// Scenario with no structures; the ego vehicle is parked far away.
fn empty_scene() -> Scenario {
    let mut sc = build_scenario(&cfg("straight_road"), 1).unwrap();
    sc.walls.clear();
    sc.blockers.clear();
    sc.traffic.clear();
    sc.ego.path = Polyline::new(vec![[0.0, 900.0], [1.0, 900.0]]).unwrap();
    sc.ego.s_start = 0.0;
    sc
}

fn at(x: f64, y: f64) -> Pose {
    Pose {
        xy: [x, y],
        heading_rad: 0.0,
    }
}

#[test]
fn scenario_is_deterministic() {
    for t in ["straight_road", "curvy_road", "intersection"] {
        let a = serde_json::to_string(&build_scenario(&cfg(t), 42).unwrap()).unwrap();
        let b = serde_json::to_string(&build_scenario(&cfg(t), 42).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn unknown_template_is_rejected() {
    assert!(build_scenario(&cfg("roundabout"), 0).is_err());
}

#[test]
fn straight_road_is_collinear() {
    let sc = build_scenario(&cfg("straight_road"), 3).unwrap();
    let y0 = sc.ego_pose(0).xy[1];
    for t in 0..sc.n_ticks() {
        let p = sc.ego_pose(t);
        assert!((p.xy[1] - y0).abs() < 1e-9);
        assert!(p.heading_rad.abs() < 1e-12);
    }
}

#[test]
fn trajectories_stay_in_bounds() {
    for t in ["straight_road", "curvy_road", "intersection"] {
        for seed in 0..5 {
            let sc = build_scenario(&cfg(t), seed).unwrap();
            let [x0, y0, x1, y1] = sc.bounds;
            for k in 0..sc.n_ticks() {
                let p = sc.ego_pose(k).xy;
                assert!(p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1, "{t} {seed} {p:?}");
            }
        }
    }
}

#[test]
fn stop_placement_varies_with_seed() {
    let c = SceneConfig {
        stop_probability: 1.0,
        ..cfg("straight_road")
    };
    let mut starts = Vec::new();
    for seed in 0..5 {
        let sc = build_scenario(&c, seed).unwrap();
        let stop = sc.ego.segments.iter().find(|s| s.kind == SegmentKind::Stop).expect("stop segment");
        assert_eq!(stop.v0, 0.0);
        starts.push(stop.t0);
    }
    starts.sort_by(f64::total_cmp);
    starts.dedup();
    assert!(starts.len() >= 4, "{starts:?}");
}

#[test]
fn speed_profile_is_continuous() {
    for seed in 0..10 {
        let sc = build_scenario(&cfg("curvy_road"), seed).unwrap();
        for w in sc.ego.segments.windows(2) {
            assert!((w[0].t1 - w[1].t0).abs() < 1e-12);
            assert!((w[0].v1 - w[1].v0).abs() < 1e-12);
        }
    }
}

#[test]
fn los_amplitude_follows_inverse_distance() {
    let mut sc = empty_scene();
    sc.rsu_height_m = 1.5;
    sc.user_height_m = 1.5;
    let cfg = ArrayConfig::default();
    let a = trace_paths_at(&sc, &at(3.0, 10.0), &[], &cfg);
    let b = trace_paths_at(&sc, &at(6.0, 20.0), &[], &cfg);
    assert_eq!((a.len(), b.len()), (1, 1));
    assert!((a[0].gain.norm() / b[0].gain.norm() - 2.0).abs() < 1e-12);
    let lambda = cfg.wavelength_m();
    let r = 109f64.sqrt();
    assert!((a[0].gain.norm() - lambda / (4.0 * std::f64::consts::PI * r)).abs() < 1e-15);
    assert!((a[0].delay_s - r / SPEED_OF_LIGHT).abs() < 1e-18);
}

#[test]
fn image_method_reflection_length() {
    let mut sc = empty_scene();
    sc.rsu_height_m = 1.5;
    sc.user_height_m = 1.5;
    sc.walls = vec![Wall {
        a: [-50.0, 10.0],
        b: [50.0, 10.0],
        height_m: 10.0,
    }];
    let paths = trace_paths_at(&sc, &at(20.0, 0.0), &[], &ArrayConfig::default());
    assert_eq!(paths.len(), 2);
    let refl = &paths[1];
    assert!((refl.delay_s * SPEED_OF_LIGHT - 800f64.sqrt()).abs() < 1e-9);
    assert!((paths[0].delay_s * SPEED_OF_LIGHT - 20.0).abs() < 1e-9);
    // Reflection point (10, 10): 45 degrees to the right of the +y heading.
    assert!((refl.aod_rad + std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    let ratio = refl.gain.norm() / paths[0].gain.norm();
    assert!((ratio - 0.5 * 20.0 / 800f64.sqrt()).abs() < 1e-12);
}

#[test]
fn reflection_needs_both_ends_on_one_side() {
    let mut sc = empty_scene();
    sc.walls = vec![Wall {
        a: [-50.0, 10.0],
        b: [50.0, 10.0],
        height_m: 10.0,
    }];
    let paths = trace_paths_at(&sc, &at(5.0, 20.0), &[], &ArrayConfig::default());
    // The wall also blocks LOS.
    assert!(paths.is_empty());
}

#[test]
fn blocker_removes_los() {
    let sc = empty_scene();
    let user = at(0.0, 20.0);
    let cfg = ArrayConfig::default();
    assert_eq!(trace_paths_at(&sc, &user, &[], &cfg).len(), 1);
    let truck = BoxObstacle {
        center: [0.0, 10.0],
        half: [4.0, 1.25],
        height_m: 4.0,
        yaw_rad: 0.0,
    };
    assert!(trace_paths_at(&sc, &user, &[truck], &cfg).is_empty());
}

#[test]
fn lidar_empty_scene_hits_only_ground() {
    let sc = empty_scene();
    let spec = SensorSpec::default();
    let pc = render_lidar(&sc, 0, &spec);
    assert!(!pc.is_empty());
    for (i, p) in pc.points.iter().enumerate() {
        assert!(p[2].abs() < 1e-9, "{p:?}");
        let r = pc.range(i);
        assert!(r <= spec.lidar_range_m + 1e-2);
        let expected = (spec.intensity_ref_m / r).powi(2).min(1.0);
        assert!((p[3] - expected).abs() < 1e-4);
    }
}

#[test]
fn lidar_box_on_boresight() {
    let mut sc = empty_scene();
    sc.blockers.push(BoxObstacle {
        center: [0.0, 20.0],
        half: [2.0, 1.0],
        height_m: 10.0,
        yaw_rad: 0.0,
    });
    let pc = render_lidar(&sc, 0, &SensorSpec::default());
    let on_box: Vec<_> = pc.points.iter().filter(|p| p[2] > 1e-6).collect();
    assert!(!on_box.is_empty());
    for p in on_box {
        // Front face at y = 19.
        assert!((p[1] - 19.0).abs() < 2e-3, "{p:?}");
        assert!(p[0].abs() <= 2.0 + 1e-3);
    }
}

#[test]
fn lidar_respects_point_cap() {
    let sc = build_scenario(&cfg("intersection"), 9).unwrap();
    let capped = SensorSpec {
        lidar_points_cap: 300,
        ..SensorSpec::default()
    };
    let spec = SensorSpec::default();
    for t in (0..sc.n_ticks()).step_by(8).take(100) {
        assert!(render_lidar(&sc, t, &capped).len() <= 300);
        assert!(render_lidar(&sc, t, &spec).len() <= spec.lidar_points_cap);
    }
}

#[test]
fn camera_empty_scene_sky_above_horizon() {
    let sc = empty_scene();
    let img = render_camera(&sc, 0, &SensorSpec::default());
    for c in 0..img.width {
        assert_eq!(img.inv_depth(0, c), 0.0);
        assert_eq!(img.class(0, c), 0);
    }
    for r in 0..img.height {
        for c in 0..img.width {
            assert_ne!(img.class(r, c), CLASS_VEHICLE);
        }
    }
    // The bottom row sees the ground.
    assert!((0..img.width).all(|c| img.inv_depth(img.height - 1, c) > 0.0));
}

#[test]
fn camera_vehicle_on_boresight_peaks_at_center_column() {
    let mut sc = empty_scene();
    sc.blockers.push(BoxObstacle {
        center: [0.0, 9.0],
        half: [2.25, 0.9],
        height_m: 1.5,
        yaw_rad: 0.0,
    });
    let img = render_camera(&sc, 0, &SensorSpec::default());
    let mut best = (0.0, 0);
    for r in 0..img.height {
        for c in 0..img.width {
            if img.class(r, c) == CLASS_VEHICLE && img.inv_depth(r, c) > best.0 {
                best = (img.inv_depth(r, c), c);
            }
        }
    }
    assert!(best.0 > 0.0);
    let mid = img.width / 2;
    assert!(best.1 == mid || best.1 == mid - 1, "column {}", best.1);
}

#[test]
fn camera_vehicle_outside_fov_is_invisible() {
    let mut sc = empty_scene();
    sc.blockers.push(BoxObstacle {
        center: [-30.0, 2.0],
        half: [2.25, 0.9],
        height_m: 1.5,
        yaw_rad: 0.0,
    });
    let img = render_camera(&sc, 0, &SensorSpec::default());
    for r in 0..img.height {
        for c in 0..img.width {
            assert_ne!(img.class(r, c), CLASS_VEHICLE);
        }
    }
}

fn small_gen(duration_s: f64) -> GenConfig {
    let mut c = GenConfig::default();
    c.scene.duration_s = duration_s;
    c.splits = SplitCounts {
        train: 2,
        val: 1,
        test: 3,
    };
    c
}

#[test]
fn one_second_trajectory_has_100_frames_and_10_sensor_frames() {
    let ds = Dataset::generate(&small_gen(1.0), 5).unwrap();
    for split in Split::ALL {
        for tr in ds.split(split) {
            assert_eq!(tr.frames.len(), 100);
            let sensor: Vec<usize> = tr.frames.iter().filter(|f| f.point_cloud.is_some()).map(|f| f.t_index).collect();
            assert_eq!(sensor.len(), 10);
            for f in &tr.frames {
                let expect = (f.t_index + 1) % 10 == 0;
                assert_eq!(f.point_cloud.is_some(), expect);
                assert_eq!(f.image.is_some(), expect);
            }
        }
    }
}

#[test]
fn stored_labels_replay_from_paths() {
    let c = small_gen(2.0);
    let ds = Dataset::generate(&c, 11).unwrap();
    let (tx, rx) = c.codebooks().unwrap();
    for split in Split::ALL {
        for tr in ds.split(split) {
            for f in &tr.frames {
                let s = label_frame(&f.paths, &c.array, &c.subcarriers, &tx, &rx).unwrap();
                assert_eq!([s.p_star, s.q_star], f.optimal_pair);
                let row = f.tx_gains.as_ref().unwrap();
                assert_eq!(row.as_slice(), s.optimal_tx_row());
                // Stored q* is the first maximiser of the stored row.
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(row.iter().position(|&g| g == best), Some(f.q_star()));
            }
        }
    }
}

fn is_los_only(f: &mmw_core::scene::FrameRecord, sc_h: f64, user_h: f64) -> bool {
    if f.paths.len() != 1 {
        return false;
    }
    let d = (f.ego.xy[0].powi(2) + f.ego.xy[1].powi(2) + (sc_h - user_h).powi(2)).sqrt();
    (f.paths[0].delay_s * SPEED_OF_LIGHT - d).abs() < 1e-6
}

#[test]
fn los_only_labels_match_sin_partition() {
    let c = small_gen(8.0);
    let ds = Dataset::generate(&c, 2).unwrap();
    let q = c.codebook.q_tx;
    let mut checked = 0;
    for tr in ds.split(Split::Test) {
        for f in tr.frames.iter().filter(|f| is_los_only(f, c.scene.rsu_height_m, c.scene.user_height_m)) {
            let s = f.paths[0].aod_rad.sin();
            let (lo, hi) = beam_sin_interval(f.q_star(), q).unwrap();
            assert!(s >= lo - 1e-9 && s <= hi + 1e-9, "sin {s} not in [{lo}, {hi}]");
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} LOS-only frames");
}

#[test]
fn straight_road_los_labels_are_monotone() {
    let mut c = small_gen(8.0);
    c.templates = vec!["straight_road".into()];
    let ds = Dataset::generate(&c, 8).unwrap();
    for tr in ds.split(Split::Test) {
        let qs: Vec<usize> = tr
            .frames
            .iter()
            .filter(|f| is_los_only(f, c.scene.rsu_height_m, c.scene.user_height_m))
            .map(|f| f.q_star())
            .collect();
        // Moving towards +x sweeps the bearing to the right.
        assert!(qs.windows(2).all(|w| w[1] <= w[0]), "{qs:?}");
    }
}

#[test]
fn write_and_load_round_trip_with_disjoint_splits() {
    let c = small_gen(0.5);
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&c, 21, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest, m);
    let fresh = Dataset::generate(&c, 21).unwrap();
    for split in Split::ALL {
        assert_eq!(loaded.split(split), fresh.split(split));
    }
    let mut ids: Vec<_> = Split::ALL.iter().flat_map(|&s| m.entries(s).iter().map(|e| e.id.clone())).collect();
    let mut seeds: Vec<_> = Split::ALL.iter().flat_map(|&s| m.entries(s).iter().map(|e| e.seed)).collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    seeds.sort();
    seeds.dedup();
    assert_eq!((ids.len(), seeds.len()), (n, n));
}

#[test]
fn generation_is_byte_identical_and_worker_independent() {
    let c = small_gen(0.5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&c, 4, a.path()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| gen_dataset(&c, 4, b.path())).unwrap();
    let id = "test-0001";
    let fa = std::fs::read(a.path().join("test").join(id).join("frames.jsonl")).unwrap();
    let fb = std::fs::read(b.path().join("test").join(id).join("frames.jsonl")).unwrap();
    assert_eq!(fa, fb);
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn gen_config_rejects_unknown_keys_and_bad_period() {
    let text = r#"{"format": "mmw-gen/1", "bogus": 1}"#;
    assert!(serde_json::from_str::<GenConfig>(text).is_err());
    let mut c = GenConfig::default();
    c.sensors.period_s = 0.015;
    assert!(c.validate().is_err());
    c.sensors.period_s = 0.1;
    assert!(c.validate().is_ok());
    c.format = "other".into();
    assert!(c.validate().is_err());
}
