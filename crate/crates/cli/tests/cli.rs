use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmw_core::model::{ModalitySet, ModelConfig};
use mmw_core::scene::{GenConfig, SceneConfig, SplitCounts};
use sha2::{Digest, Sha256};

fn mmw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmw"))
        .args(args)
        .env("MMW_LOG", "error")
        .output()
        .expect("spawn mmw")
}

fn ok(args: &[&str]) -> String {
    let out = mmw(args);
    assert!(
        out.status.success(),
        "mmw {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    fs::write(path, serde_json::to_string(value).unwrap()).unwrap();
}

fn small_gen(dir: &Path) -> PathBuf {
    let cfg = GenConfig {
        scene: SceneConfig {
            duration_s: 1.0,
            ..SceneConfig::default()
        },
        splits: SplitCounts {
            train: 2,
            val: 1,
            test: 2,
        },
        ..GenConfig::default()
    };
    let path = dir.join("gen.json");
    write_json(&path, &cfg);
    path
}

fn small_model(dir: &Path) -> PathBuf {
    let cfg = ModelConfig {
        modalities: ModalitySet::IndexLidar,
        d_m: 8,
        d_model: 16,
        d_ff: 4,
        n_heads: 2,
        n_layers: 1,
        vocab_size: 32,
        prototypes: 4,
        lidar_channels: 2,
        p_hist: 40,
        w_horizon: 10,
        epochs: 2,
        ..ModelConfig::default()
    };
    let path = dir.join("model.json");
    write_json(&path, &cfg);
    path
}

/// Digest of every file under `dir`, in sorted path order.
fn tree_hash(dir: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, out);
            } else {
                out.push(path);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn file_hash(path: &Path) -> String {
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn help_is_available_for_every_subcommand() {
    assert!(ok(&["--help"]).contains("sweep-nt"));
    for sub in ["gen", "impair", "train", "eval", "ablate", "sweep-nt", "oracle"] {
        let text = ok(&[sub, "--help"]);
        assert!(text.contains("--workers"), "{sub}");
    }
    assert!(ok(&["--version"]).starts_with("mmw "));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mmw(&[]).status.code(), Some(1));
    assert_eq!(mmw(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mmw(&["eval", "--data", "x", "--report", "y", "--predictor", "psychic"]).status.code(), Some(1));
    assert_eq!(mmw(&["gen", "--out", p(dir.path()), "--workers", "0"]).status.code(), Some(1));

    let missing = dir.path().join("nope");
    assert_eq!(mmw(&["oracle", "--data", p(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"format":"mmw-gen/1","colour":"blue"}"#).unwrap();
    let out = mmw(&["gen", "--config", p(&bad), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = mmw(&["impair", "--in", p(&missing), "--weather", "hail", "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_verify_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let gen = small_gen(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen", "--config", p(&gen), "--out", p(&a), "--seed", "5"]);
    ok(&["gen", "--config", p(&gen), "--out", p(&b), "--seed", "5", "--workers", "1"]);
    assert_eq!(tree_hash(&a), tree_hash(&b));
    let c = dir.path().join("c");
    ok(&["gen", "--config", p(&gen), "--out", p(&c), "--seed", "6"]);
    assert_ne!(tree_hash(&a), tree_hash(&c));

    assert!(ok(&["oracle", "--data", p(&a)]).contains("labels verified"));

    let fog = dir.path().join("fog");
    ok(&["impair", "--in", p(&a), "--weather", "fog_heavy", "--out", p(&fog)]);
    assert!(ok(&["oracle", "--data", p(&fog)]).contains("labels verified"));
    assert_ne!(tree_hash(&a), tree_hash(&fog));

    let rep = dir.path().join("oracle_report");
    let text = ok(&["eval", "--data", p(&a), "--report", p(&rep), "--oracle"]);
    assert!(text.contains("avg gain 1.0000, acc@1 1.0000"), "{text}");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(rep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["avg_gain"], 1.0);
    assert_eq!(summary["avg_acc1"], 1.0);
    let out = mmw(&["eval", "--data", p(&a), "--report", p(&rep)]);
    assert_eq!(out.status.code(), Some(1));

    let model = small_model(dir.path());
    let ck1 = dir.path().join("m1.ckpt");
    let ck2 = dir.path().join("m2.ckpt");
    ok(&["train", "--data", p(&a), "--model-config", p(&model), "--out", p(&ck1)]);
    ok(&["train", "--data", p(&a), "--model-config", p(&model), "--out", p(&ck2), "--workers", "1"]);
    assert_eq!(file_hash(&ck1), file_hash(&ck2));
    let log = fs::read_to_string(dir.path().join("m1.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    ok(&["eval", "--ckpt", p(&ck1), "--data", p(&a), "--report", p(&r1), "--dump-attention", "1"]);
    ok(&["eval", "--ckpt", p(&ck1), "--data", p(&a), "--report", p(&r2), "--dump-attention", "1", "--workers", "1"]);
    assert_eq!(tree_hash(&r1), tree_hash(&r2));
    assert!(r1.join("attention/attention.pgm").exists());
    let out = mmw(&["eval", "--ckpt", p(&ck1), "--data", p(&a), "--report", p(&r1), "--dump-attention", "9"]);
    assert_eq!(out.status.code(), Some(2));

    let sweep = dir.path().join("sweep");
    let text = ok(&["sweep-nt", "--ckpt", p(&ck1), "--nt", "8,16", "--out", p(&sweep)]);
    assert_eq!(text.lines().count(), 3);
    assert!(sweep.join("nt8/summary.json").exists());
}

#[test]
fn ablation_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let gen = small_gen(dir.path());
    let data = dir.path().join("d");
    ok(&["gen", "--config", p(&gen), "--out", p(&data)]);
    let model = small_model(dir.path());
    let out = dir.path().join("abl");
    ok(&["ablate", "--data", p(&data), "--axes", "bgam", "--model-config", p(&model), "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("index+lidar,on") && csv.contains("index+lidar,off"));
    let bad = mmw(&["ablate", "--data", p(&data), "--axes", "depth", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}
