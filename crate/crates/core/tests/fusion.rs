use mmw_core::fusion::{
    alignment_index, assemble_llm_input, autocorrelation_fft, cross_modality_attend, stack_modalities, temporal_align,
    top_lags, AlignmentConfig, PromptEncoder, PromptStats, Reprogrammer, Trend, PROMPT_FEATURES,
};
use mmw_core::tensor::{grad_check_params, AttentionParams, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.dims(x);
    let w = tape.constant(randn(r, c, seed));
    let m = tape.mul(x, w).unwrap();
    tape.sum(m)
}

#[test]
fn temporal_alignment_matches_backward_replication() {
    for j in [5, 10] {
        let p = 40;
        let sparse = randn(p / j, 6, j as u64);
        let mut tape = Tape::new();
        let s = tape.constant(sparse.clone());
        let dense = temporal_align(&mut tape, s, j, p).unwrap();
        // Frame k arrives at the end of steps [k j, (k + 1) j) and is copied back over them.
        let mut oracle = Vec::new();
        for k in 0..p / j {
            for _ in 0..j {
                oracle.extend_from_slice(&sparse.data[k * 6..(k + 1) * 6]);
            }
        }
        assert_eq!(tape.value(dense), oracle.as_slice());
        assert_eq!(tape.dims(dense), (p, 6));
    }
    assert_eq!(alignment_index(10, 40).unwrap()[9], 0);
    assert_eq!(alignment_index(10, 40).unwrap()[10], 1);
    assert!(alignment_index(10, 35).is_err());
    let mut tape = Tape::new();
    let s = tape.constant(randn(3, 2, 1));
    assert!(temporal_align(&mut tape, s, 10, 40).is_err());
}

#[test]
fn alignment_config_validation() {
    let ok = AlignmentConfig {
        p_hist: 40,
        w_horizon: 10,
        j_ratio: 10,
    };
    assert!(ok.validate().is_ok());
    assert_eq!(ok.frames(), 4);
    assert!(AlignmentConfig { j_ratio: 7, ..ok }.validate().is_err());
    assert!(AlignmentConfig { w_horizon: 0, ..ok }.validate().is_err());
}

#[test]
fn stacking_interleaves_modalities_per_step() {
    let parts: Vec<Tensor> = (0..3).map(|m| randn(5, 4, m)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts.iter().map(|t| tape.constant(t.clone())).collect();
    let s = stack_modalities(&mut tape, &vars).unwrap();
    assert_eq!(tape.dims(s), (15, 4));
    for t in 0..5 {
        for m in 0..3 {
            assert_eq!(&tape.value(s)[(t * 3 + m) * 4..(t * 3 + m + 1) * 4], &parts[m].data[t * 4..(t + 1) * 4]);
        }
    }
    let single = stack_modalities(&mut tape, &vars[..1]).unwrap();
    assert_eq!(single, vars[0]);
    let odd = tape.constant(randn(4, 4, 9));
    assert!(stack_modalities(&mut tape, &[vars[0], odd]).is_err());
    assert!(stack_modalities(&mut tape, &[]).is_err());
}

#[test]
fn cross_modality_attention_is_per_step() {
    let (p, m, d) = (4, 3, 4);
    let mut store = ParamStore::new();
    let attn = AttentionParams::register(&mut store, "x", d, 2, &mut rng(1)).unwrap();
    let stacked = randn(p * m, d, 2);
    let query = randn(p, d, 3);
    let run = |st: &Tensor| {
        let mut tape = Tape::new();
        let s = tape.constant(st.clone());
        let q = tape.constant(query.clone());
        let b = cross_modality_attend(&mut tape, &store, s, q, &attn).unwrap();
        assert_eq!(tape.dims(b), (p, d));
        tape.value(b).to_vec()
    };
    let base = run(&stacked);
    // Changing step 2's modality rows only changes output row 2.
    let mut other = stacked.clone();
    for v in &mut other.data[2 * m * d..3 * m * d] {
        *v += 0.5;
    }
    let changed = run(&other);
    for t in 0..p {
        let same = base[t * d..(t + 1) * d] == changed[t * d..(t + 1) * d];
        assert_eq!(same, t != 2);
    }
    let rep = grad_check_params(
        |t, s| {
            let st = t.constant(stacked.clone());
            let q = t.leaf(query.clone());
            let b = cross_modality_attend(t, s, st, q, &attn)?;
            Ok(project(t, b, 4))
        },
        &store,
        1e-6,
        32,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
}

#[test]
fn reprogramming_shapes_gradients_and_single_prototype() {
    let mut store = ParamStore::new();
    let rp = Reprogrammer::register(&mut store, "r", 12, 3, 4, 8, 2, 77, &mut rng(1)).unwrap();
    assert!(!store.get(rp.vocab).trainable);
    let fused = randn(5, 4, 2);
    let mut tape = Tape::new();
    let protos = rp.prototypes(&mut tape, &store).unwrap();
    assert_eq!(tape.dims(protos), (3, 8));
    let f = tape.constant(fused.clone());
    let z = rp.forward(&mut tape, &store, f, protos).unwrap();
    assert_eq!(tape.dims(z), (5, 8));
    let rep = grad_check_params(
        |t, s| {
            let e = rp.prototypes(t, s)?;
            let f = t.constant(fused.clone());
            let z = rp.forward(t, s, f, e)?;
            Ok(project(t, z, 3))
        },
        &store,
        1e-6,
        16,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");

    // One prototype: every row is that prototype's value projection.
    let mut store = ParamStore::new();
    let rp = Reprogrammer::register(&mut store, "r", 12, 1, 4, 8, 2, 77, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let e = rp.prototypes(&mut tape, &store).unwrap();
    let f = tape.constant(fused.clone());
    let z = rp.forward(&mut tape, &store, f, e).unwrap();
    let wv = tape.param(&store, rp.attn.wv);
    let v = tape.matmul(e, wv).unwrap();
    let v = tape.value(v).to_vec();
    for row in tape.value(z).chunks(8) {
        for (a, b) in row.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn vocabulary_depends_only_on_its_seed() {
    let build = |vs: u64, rs: u64| {
        let mut store = ParamStore::new();
        let rp = Reprogrammer::register(&mut store, "r", 6, 2, 4, 4, 2, vs, &mut rng(rs)).unwrap();
        store.get(rp.vocab).tensor.clone()
    };
    assert_eq!(build(1, 2), build(1, 3));
    assert_ne!(build(1, 2), build(2, 2));
}

#[test]
fn prompt_statistics_examples() {
    let up: Vec<f64> = (1..=8).map(|q| q as f64 / 16.0).collect();
    let s = PromptStats::compute(&up).unwrap();
    assert_eq!(s.trend, Trend::Upward);
    assert_eq!(s.min, 1.0 / 16.0);
    assert_eq!(s.max, 0.5);
    assert_eq!(s.median, 0.5 * (4.0 + 5.0) / 16.0);
    assert_eq!(s.top_lags.len(), 5);

    let flat = PromptStats::compute(&[0.25; 10]).unwrap();
    assert_eq!((flat.min, flat.max, flat.median), (0.25, 0.25, 0.25));
    assert_eq!(flat.trend, Trend::Upward);
    assert_eq!(flat.top_lags, vec![1, 2, 3, 4, 5]);

    let down = PromptStats::compute(&[0.5, 0.4, 0.45, 0.1]).unwrap();
    assert_eq!(down.trend, Trend::Downward);
    assert!((down.median - 0.425).abs() < 1e-15);

    // Period-4 square wave: lag 4 correlates perfectly.
    let sq: Vec<f64> = (0..40).map(|t| if t % 4 < 2 { 0.75 } else { 0.25 }).collect();
    let s = PromptStats::compute(&sq).unwrap();
    assert_eq!(s.top_lags[0], 4);
    let f = s.features(40);
    assert_eq!(f.len(), PROMPT_FEATURES);
    // Each period steps down, so the fitted slope is negative.
    assert_eq!(f[3], 0.0);
    assert_eq!(f[4], 0.1);
    assert!(PromptStats::compute(&[0.1]).is_err());
}

fn autocorrelation_direct(seq: &[f64]) -> Vec<f64> {
    let n = seq.len();
    let mean = seq.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|k| (0..n).map(|t| (seq[t] - mean) * (seq[(t + k) % n] - mean)).sum::<f64>())
        .collect()
}

#[test]
fn fft_lag_ranking_matches_direct_autocorrelation() {
    let mut r = rng(11);
    for trial in 0..100 {
        let n = 40;
        let seq: Vec<f64> = if trial % 2 == 0 {
            (0..n).map(|_| r.gen_range(0..16) as f64 / 16.0).collect()
        } else {
            (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
        };
        let fast = autocorrelation_fft(&seq);
        let slow = autocorrelation_direct(&seq);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9 * slow[0].abs().max(1.0));
        }
        // Brute-force ranking: sort lags 1..n by direct value, ties to the smaller lag.
        let mut lags: Vec<usize> = (1..n).collect();
        let q = |k: usize| (slow[k] / slow[0] * 1e9).round() as i64;
        lags.sort_by(|&a, &b| q(b).cmp(&q(a)).then(a.cmp(&b)));
        assert_eq!(top_lags(&fast, 5), lags[..5].to_vec(), "trial {trial}");
    }
}

#[test]
fn prompt_prefix_and_assembly() {
    let mut store = ParamStore::new();
    let enc = PromptEncoder::register(&mut store, "p", 4, 8, &mut rng(1)).unwrap();
    let stats = PromptStats::compute(&[0.1, 0.2, 0.3, 0.2, 0.1, 0.2, 0.3, 0.2]).unwrap();
    let mut tape = Tape::new();
    let prefix = enc.forward(&mut tape, &store, &stats, 8).unwrap().unwrap();
    assert_eq!(tape.dims(prefix), (4, 8));
    let z = tape.constant(randn(6, 8, 2));
    let zt = assemble_llm_input(&mut tape, Some(prefix), z).unwrap();
    assert_eq!(tape.dims(zt), (10, 8));
    assert_eq!(&tape.value(zt)[32..], tape.value(z));
    assert_eq!(assemble_llm_input(&mut tape, None, z).unwrap(), z);
    let narrow = tape.constant(randn(6, 4, 2));
    assert!(assemble_llm_input(&mut tape, Some(prefix), narrow).is_err());

    let rep = grad_check_params(
        |t, s| {
            let p = enc.forward(t, s, &stats, 8)?.expect("prefix");
            Ok(project(t, p, 5))
        },
        &store,
        1e-6,
        32,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");

    let mut store = ParamStore::new();
    let none = PromptEncoder::register(&mut store, "p", 0, 8, &mut rng(1)).unwrap();
    assert!(none.forward(&mut Tape::new(), &store, &stats, 8).unwrap().is_none());
}
