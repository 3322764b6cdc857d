use mmw_core::tensor::{
    attention_reference, grad_check, load_checkpoint, multi_head_attention,
    multi_head_cross_attention, save_checkpoint, Adam, AttentionOptions, AttentionParams,
    Checkpoint, ParamStore, Tape, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let w = randn(tape.shape(x), seed ^ 0xabcd);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let report = grad_check(
        |t, v| {
            let y = f(t, v);
            Ok(weighted_sum(t, y, 7))
        },
        inputs,
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![0.0; 4]));
    let y = t.softmax(x);
    assert_eq!(t.value(y), &[0.25; 4]);
}

#[test]
fn softmax_rows_sum_to_one_and_are_shift_invariant() {
    let x = randn(&[5, 7], 1);
    let mut t = Tape::new();
    let a = t.constant(x.clone());
    let shifted = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v + 123.0).collect()).unwrap();
    let b = t.constant(shifted);
    let sa = t.softmax(a);
    let sb = t.softmax(b);
    for r in 0..5 {
        let row = &t.value(sa)[r * 7..(r + 1) * 7];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for (u, v) in t.value(sa).iter().zip(t.value(sb)) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn identity_matmul() {
    let a = randn(&[3, 4], 2);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let mut t = Tape::new();
    let i = t.constant(Tensor::matrix(3, 3, eye).unwrap());
    let av = t.constant(a.clone());
    let y = t.matmul(i, av).unwrap();
    assert_eq!(t.value(y), &a.data[..]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let z = t_zero(&mut t);
    let err = t.add(a, z).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

fn t_zero(t: &mut Tape) -> Var {
    t.constant(Tensor::zeros(&[3, 2]))
}

#[test]
fn conv1d_center_tap_is_identity() {
    let x = randn(&[9, 1], 3);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::matrix(3, 1, vec![0.0, 1.0, 0.0]).unwrap());
    let b = t.constant(Tensor::zeros(&[1, 1]));
    let y = t.conv1d(xv, w, b).unwrap();
    assert_eq!(t.value(y), &x.data[..]);
}

#[test]
fn conv1d_replicate_padding_by_hand() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
    let w = t.constant(Tensor::matrix(3, 1, vec![1.0, 10.0, 100.0]).unwrap());
    let b = t.constant(Tensor::zeros(&[1, 1]));
    let y = t.conv1d(x, w, b).unwrap();
    // row t = x[t-1] + 10 x[t] + 100 x[t+1], with edges replicated
    assert_eq!(t.value(y), &[1.0 + 10.0 + 200.0, 1.0 + 20.0 + 400.0, 2.0 + 40.0 + 400.0]);
}

#[test]
fn quadratic_gradient_is_exact() {
    let x = randn(&[4, 3], 4);
    let report = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_output() {
    let x = Tensor::row(vec![f64::INFINITY]);
    let r = grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-5);
    assert!(r.is_err());
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let a = randn(&[3, 4], 10);
    let b = randn(&[3, 4], 11);
    assert!(check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()) < 1e-5);
    assert!(check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap()) < 1e-5);
    assert!(check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap()) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.scale(v[0], -2.5)) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.relu(v[0])) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.gelu(v[0])) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.softmax(v[0])) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.transpose(v[0])) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.mean(v[0])) < 1e-5);
    assert!(check(&[a], |t, v| t.reshape(v[0], &[2, 6]).unwrap()) < 1e-5);
}

#[test]
fn linear_ops_pass_grad_check() {
    let x = randn(&[5, 3], 20);
    let w = randn(&[3, 4], 21);
    let b = randn(&[1, 4], 22);
    let e = check(&[x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
    assert!(e < 1e-5, "{e}");
}

#[test]
fn layer_norm_passes_grad_check() {
    let x = randn(&[4, 6], 30);
    let g = randn(&[1, 6], 31);
    let b = randn(&[1, 6], 32);
    let e = check(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
    assert!(e < 1e-5, "{e}");
}

#[test]
fn conv1d_relu_chain_passes_grad_check() {
    let x = randn(&[8, 2], 40);
    let w = randn(&[6, 3], 41);
    let b = randn(&[1, 3], 42);
    let e = check(&[x, w, b], |t, v| {
        let y = t.conv1d(v[0], v[1], v[2]).unwrap();
        t.relu(y)
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn conv2d_and_upsample_pass_grad_check() {
    for stride in [1, 2] {
        let x = randn(&[2, 5, 6], 50);
        let w = randn(&[3, 18], 51);
        let b = randn(&[1, 3], 52);
        let e = check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], stride).unwrap());
        assert!(e < 1e-5, "stride {stride}: {e}");
    }
    let x = randn(&[2, 3, 2], 53);
    assert!(check(&[x], |t, v| t.upsample2x(v[0]).unwrap()) < 1e-5);
}

#[test]
fn conv2d_matches_direct_sum() {
    let x = randn(&[2, 4, 5], 54);
    let w = randn(&[3, 18], 55);
    let b = randn(&[1, 3], 56);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, 2).unwrap();
    assert_eq!(t.shape(y), &[3, 2, 3]);
    for co in 0..3 {
        for oy in 0..2 {
            for ox in 0..3 {
                let mut s = b.data[co];
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as i64 - 1;
                            let ix = (2 * ox + kx) as i64 - 1;
                            if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                s += w.data[co * 18 + ci * 9 + ky * 3 + kx]
                                    * x.data[ci * 20 + iy as usize * 5 + ix as usize];
                            }
                        }
                    }
                }
                let got = t.value(y)[co * 6 + oy * 3 + ox];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn structural_ops_pass_grad_check() {
    let a = randn(&[3, 4], 60);
    let b = randn(&[2, 4], 61);
    let c = randn(&[3, 2], 62);
    assert!(check(&[a.clone(), b.clone()], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()) < 1e-5);
    assert!(check(&[a.clone(), c], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap()) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap()) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap()) < 1e-5);
    assert!(check(&[a.clone()], |t, v| t.scale_columns(v[0], &[1.0, 0.0, -2.0, 0.5]).unwrap()) < 1e-5);
    assert!(check(&[a], |t, v| t.scatter_cells(v[0], &[4, 0, 2], 6).unwrap()) < 1e-5);
    let g = randn(&[6, 3], 63);
    assert!(check(&[g], |t, v| t.group_max(v[0], 3, &[3, 2]).unwrap()) < 1e-5);
}

#[test]
fn concat_and_slice_round_trip_gradients() {
    let mut t = Tape::new();
    let a = t.leaf(randn(&[2, 3], 70));
    let b = t.leaf(randn(&[4, 3], 71));
    let cat = t.concat_rows(&[a, b]).unwrap();
    let back_a = t.slice_rows(cat, 0, 2).unwrap();
    let back_b = t.slice_rows(cat, 2, 4).unwrap();
    let sa = t.sum(back_a);
    let sb = t.sum(back_b);
    let sb2 = t.scale(sb, 3.0);
    let loss = t.add(sa, sb2).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap(), &[1.0; 6]);
    assert_eq!(g.get(b).unwrap(), &[3.0; 12]);
}

#[test]
fn group_max_skips_padding_and_is_order_invariant() {
    let mut t = Tape::new();
    let x = t.constant(
        Tensor::matrix(4, 2, vec![1.0, -5.0, 3.0, -7.0, 99.0, 99.0, 0.0, 0.0]).unwrap(),
    );
    let y = t.group_max(x, 2, &[2, 0]).unwrap();
    assert_eq!(t.value(y), &[3.0, -5.0, 0.0, 0.0]);
    let x2 = t.constant(
        Tensor::matrix(4, 2, vec![3.0, -7.0, 1.0, -5.0, 99.0, 99.0, 0.0, 0.0]).unwrap(),
    );
    let y2 = t.group_max(x2, 2, &[2, 0]).unwrap();
    assert_eq!(t.value(y), t.value(y2));
}

/// Straight-line scalar attention, written without the tape.
#[allow(clippy::too_many_arguments)]
fn scalar_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let lim = if causal { i + 1 } else { nk };
            let mut s: Vec<f64> = (0..lim)
                .map(|j| {
                    (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter_mut().map(|x| {
                *x = (*x - m).exp();
                *x
            }).sum();
            for (j, w) in s.iter().enumerate() {
                for c in 0..dh {
                    out[i * d + h * dh + c] += w / z * v[j * d + h * dh + c];
                }
            }
        }
    }
    out
}

fn matmul_plain(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

#[test]
fn two_head_attention_matches_scalar_oracle() {
    let (nq, nk, d) = (3, 5, 6);
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "attn", d, 2, &mut rng(80)).unwrap();
    let query = randn(&[nq, d], 81);
    let kv = randn(&[nk, d], 82);
    let mut t = Tape::new();
    let qv = t.constant(query.clone());
    let kvv = t.constant(kv.clone());
    let y = multi_head_cross_attention(&mut t, &store, qv, kvv, &p).unwrap();
    let w = |id| &store.get(id).tensor.data;
    let q = matmul_plain(&query.data, w(p.wq), nq, d, d);
    let k = matmul_plain(&kv.data, w(p.wk), nk, d, d);
    let v = matmul_plain(&kv.data, w(p.wv), nk, d, d);
    let expect = scalar_attention(&q, &k, &v, nq, nk, d, 2, false);
    for (a, b) in t.value(y).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn fused_attention_matches_composite_ops() {
    for causal in [false, true] {
        let (n, d) = (5, 8);
        let mut store = ParamStore::new();
        let p = AttentionParams::register(&mut store, "a", d, 4, &mut rng(90)).unwrap();
        let x = randn(&[n, d], 91);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let opts = AttentionOptions {
            causal,
            ..Default::default()
        };
        let fused = multi_head_attention(&mut t, &store, xv, xv, &p, &opts).unwrap();
        let (wq, wk, wv) = (t.param(&store, p.wq), t.param(&store, p.wk), t.param(&store, p.wv));
        let q = t.matmul(xv, wq).unwrap();
        let k = t.matmul(xv, wk).unwrap();
        let v = t.matmul(xv, wv).unwrap();
        let reference = attention_reference(&mut t, q, k, v, 4, causal).unwrap();
        for (a, b) in t.value(fused).iter().zip(t.value(reference)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_key_returns_projected_value() {
    let d = 4;
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "a", d, 2, &mut rng(100)).unwrap();
    let kv = randn(&[1, d], 101);
    let v = matmul_plain(&kv.data, &store.get(p.wv).tensor.data, 1, d, d);
    for seed in [102, 103] {
        let mut t = Tape::new();
        let q = t.constant(randn(&[2, d], seed));
        let k = t.constant(kv.clone());
        let y = multi_head_cross_attention(&mut t, &store, q, k, &p).unwrap();
        for r in 0..2 {
            for c in 0..d {
                assert!((t.value(y)[r * d + c] - v[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let d = 4;
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "a", d, 1, &mut rng(110)).unwrap();
    let row = randn(&[1, d], 111).data;
    let kv = Tensor::matrix(3, d, [row.clone(), row.clone(), row].concat()).unwrap();
    let mut t = Tape::new();
    let q = t.constant(randn(&[1, d], 112));
    let k = t.constant(kv);
    let y = multi_head_cross_attention(&mut t, &store, q, k, &p).unwrap();
    let probs = t.attention_probs(y).unwrap();
    for w in probs {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn attention_output_is_convex_in_values() {
    let (nk, d) = (6, 4);
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "a", d, 2, &mut rng(120)).unwrap();
    let kv = randn(&[nk, d], 121);
    let v = matmul_plain(&kv.data, &store.get(p.wv).tensor.data, nk, d, d);
    let mut t = Tape::new();
    let q = t.constant(randn(&[5, d], 122));
    let k = t.constant(kv);
    let y = multi_head_cross_attention(&mut t, &store, q, k, &p).unwrap();
    for r in 0..5 {
        for c in 0..d {
            let col = (0..nk).map(|j| v[j * d + c]);
            let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
            let o = t.value(y)[r * d + c];
            assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }
}

#[test]
fn indivisible_heads_are_rejected() {
    let mut store = ParamStore::new();
    assert!(AttentionParams::register(&mut store, "a", 6, 4, &mut rng(0)).is_err());
}

#[test]
fn fused_attention_passes_grad_check_with_groups_mask_and_causality() {
    let d = 4;
    let q = randn(&[6, d], 130);
    let k = randn(&[6, d], 131);
    let v = randn(&[6, d], 132);
    for (groups, causal, mask) in [
        (1, false, None),
        (2, true, None),
        (3, false, Some(vec![true, false, false, false, true, true])),
    ] {
        let report = grad_check(
            |t, vars| {
                let mut store = ParamStore::new();
                let p = AttentionParams::register(&mut store, "a", d, 2, &mut rng(133))?;
                let opts = AttentionOptions {
                    groups,
                    causal,
                    key_mask: mask.clone(),
                };
                let qx = t.add(vars[0], vars[1])?;
                let y = multi_head_attention(t, &store, qx, vars[2], &p, &opts)?;
                Ok(weighted_sum(t, y, 134))
            },
            &[q.clone(), k.clone(), v.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{groups} {causal}: {report:?}");
    }
}

#[test]
fn fully_masked_query_outputs_zero() {
    let d = 2;
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "a", d, 1, &mut rng(140)).unwrap();
    let mut t = Tape::new();
    let q = t.constant(randn(&[1, d], 141));
    let kv = t.constant(randn(&[3, d], 142));
    let opts = AttentionOptions {
        key_mask: Some(vec![false; 3]),
        ..Default::default()
    };
    let y = multi_head_attention(&mut t, &store, q, kv, &p, &opts).unwrap();
    assert_eq!(t.value(y), &[0.0, 0.0]);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.add("w", randn(&[2, 2], 150), true).unwrap();
    let before = store.get(id).tensor.clone();
    let mut opt = Adam::new(0.1);
    opt.step(&mut store, &[Some(vec![0.0; 4])]).unwrap();
    assert_eq!(store.get(id).tensor, before);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![1.0, 1.0, 1.0]), true).unwrap();
    let mut opt = Adam::new(0.01);
    opt.step(&mut store, &[Some(vec![0.5, -2.0, 0.0])]).unwrap();
    // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
    let d = &store.get(id).tensor.data;
    assert!((d[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    assert!((d[1] - (1.0 + 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    assert_eq!(d[2], 1.0);
}

#[test]
fn adam_is_deterministic_and_skips_frozen() {
    let run = || {
        let mut store = ParamStore::new();
        store.add("w", randn(&[3, 3], 160), true).unwrap();
        store.add("e", randn(&[2, 2], 161), false).unwrap();
        let mut opt = Adam::new(0.05);
        for s in 0..5 {
            let g = randn(&[3, 3], 170 + s).data;
            opt.step(&mut store, &[Some(g), Some(vec![1.0; 4])]).unwrap();
        }
        store
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.iter().nth(1).unwrap().tensor, randn(&[2, 2], 161));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut store = ParamStore::new();
    store.add("a.w", randn(&[3, 2], 180), true).unwrap();
    store.add("vocab", randn(&[4, 5], 181), false).unwrap();
    let ckpt = Checkpoint {
        store,
        model_config: serde_json::json!({"d_m": 8}),
        data_config: serde_json::json!({"q": 16}),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    std::fs::write(&path, b"xx").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
