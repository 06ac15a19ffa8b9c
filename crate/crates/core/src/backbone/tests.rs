use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::prior::GateParams;
use crate::series::Window;

fn window(n_var: usize, t_ctx: usize, t_hor: usize, seed: u64) -> Window<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Window {
        context: (0..n_var)
            .map(|_| (0..t_ctx).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
        horizon: (0..n_var)
            .map(|_| (0..t_hor).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
        source_id: "w".into(),
        offset: 0,
    }
}

fn model(cfg: BackboneConfig, seed: u64) -> ModelState<f64> {
    let mut m = ModelState::init(cfg, GateParams::default(), seed).unwrap();
    // larger router weights so routing is not nearly uniform
    for l in &mut m.layers {
        l.router.mapv_inplace(|v| v * 50.0);
    }
    m
}

#[test]
fn token_counts() {
    let m = model(BackboneConfig::tiny(), 1);
    let seq = embed_and_pack(&window(1, 64, 16, 1), &m, None).unwrap();
    assert_eq!(seq.n_tokens(), 5);
    assert_eq!(seq.is_masked, vec![false, false, false, false, true]);

    let seq = embed_and_pack(&window(2, 64, 16, 1), &m, None).unwrap();
    assert_eq!(seq.n_tokens(), 10);
    assert_eq!(seq.variate_id, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    assert_eq!(seq.position[5..], [0, 1, 2, 3, 4]);

    let too_long = window(1, 16 * 64, 16, 1);
    assert!(matches!(
        embed_and_pack(&too_long, &m, None),
        Err(crate::AmeError::SequenceTooLong { .. })
    ));
}

#[test]
fn masked_tokens_ignore_horizon() {
    let m = model(BackboneConfig::tiny(), 2);
    let w = window(2, 50, 20, 3);
    let mut w0 = w.clone();
    w0.horizon
        .iter_mut()
        .for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
    let a = embed_and_pack(&w, &m, None).unwrap();
    let b = embed_and_pack(&w0, &m, None).unwrap();
    assert_eq!(a.tokens, b.tokens);
    let pa = encoder_forward(&a, &m, ForwardOptions::default()).unwrap();
    let pb = encoder_forward(&b, &m, ForwardOptions::default()).unwrap();
    assert_eq!(pa.representations, pb.representations);
    for (x, y) in pa.router_inputs.iter().zip(&pb.router_inputs) {
        assert_eq!(x, y);
    }
}

#[test]
fn route_examples() {
    let logits = [0.3f64, -1.0, 2.0, 0.5, 0.1];
    let (p, sel, w) = route(&logits, 5);
    assert_eq!(sel, vec![2, 3, 0, 4, 1]);
    for (j, &e) in sel.iter().enumerate() {
        assert!((w[j] - p[e]).abs() < 1e-15);
    }
    let (_, sel, _) = route(&[3.0, 1.0, 1.0, 1.0, 1.0], 2);
    assert_eq!(sel, vec![0, 1]);
}

#[test]
fn route_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (p, sel, w) = route(&logits, 2);
        let mut pairs: Vec<(f64, usize)> = logits.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let expect: Vec<usize> = pairs[..2].iter().map(|x| x.1).collect();
        assert_eq!(sel, expect);
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let pe: Vec<f64> = expect.iter().map(|&e| (logits[e] - m).exp() / z).collect();
        for j in 0..2 {
            assert!((w[j] - pe[j] / (pe[0] + pe[1])).abs() < 1e-12);
            assert!((p[expect[j]] - pe[j]).abs() < 1e-12);
        }
    }
}

fn rand_tokens(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn k1_uses_single_expert() {
    let mut cfg = BackboneConfig::tiny();
    cfg.top_k = 1;
    let m = model(cfg, 5);
    let x = rand_tokens(6, 32, 6);
    let (y, rec, _) = moe_layer_forward(&x, &m.layers[0], 1, None, None).unwrap();
    for t in 0..6 {
        let e = rec.top1(t);
        let (_, _, out) = expert_forward(
            &x.row(t).to_owned().insert_axis(ndarray::Axis(0)),
            &m.layers[0].experts[e],
        );
        for (a, b) in y.row(t).iter().zip(out.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_experts_make_routing_irrelevant() {
    let mut m = model(BackboneConfig::tiny(), 7);
    let first = m.layers[0].experts[0].clone();
    m.layers[0]
        .experts
        .iter_mut()
        .for_each(|e| *e = first.clone());
    let x = rand_tokens(5, 32, 8);
    let (y, _, _) = moe_layer_forward(&x, &m.layers[0], 2, None, None).unwrap();
    let (_, _, single) = expert_forward(&x, &first);
    for (a, b) in y.iter().zip(single.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sparse_equals_dense_dispatch() {
    let mut cfg = BackboneConfig::tiny();
    cfg.experts_total = 3;
    for k in 1..=3 {
        cfg.top_k = k;
        let m = model(cfg, 9);
        let x = rand_tokens(7, 32, 10);
        let (y, rec, _) = moe_layer_forward(&x, &m.layers[0], k, None, None).unwrap();
        // every expert runs on every token; unselected ones get weight zero
        let outs: Vec<Array2<f64>> = m.layers[0]
            .experts
            .iter()
            .map(|e| expert_forward(&x, e).2)
            .collect();
        for t in 0..7 {
            let mut dense = Array1::<f64>::zeros(32);
            for (e, out) in outs.iter().enumerate() {
                let w = rec.topk[t]
                    .iter()
                    .position(|&s| s == e)
                    .map_or(0.0, |j| rec.weights[t][j]);
                dense.scaled_add(w, &out.row(t));
            }
            for (a, b) in y.row(t).iter().zip(dense.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn routing_distributions_normalized() {
    let m = model(BackboneConfig::tiny(), 11);
    let seq = embed_and_pack(&window(3, 64, 32, 12), &m, None).unwrap();
    let pass = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    for rec in &pass.records {
        for row in rec.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        for w in &rec.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_layers_is_identity() {
    let mut cfg = BackboneConfig::tiny();
    cfg.n_layers = 0;
    let m = model(cfg, 13);
    let seq = embed_and_pack(&window(1, 64, 16, 14), &m, None).unwrap();
    let pass = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    assert_eq!(pass.representations, seq.tokens);
    assert!(pass.records.is_empty());
}

#[test]
fn permutation_equivariance() {
    let m = model(BackboneConfig::tiny(), 15);
    let seq = embed_and_pack(&window(2, 48, 16, 16), &m, None).unwrap();
    let n = seq.n_tokens();
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut shuffled = seq.clone();
    shuffled.tokens = seq.tokens.select(ndarray::Axis(0), &perm);
    shuffled.pad_mask = perm.iter().map(|&i| seq.pad_mask[i]).collect();
    let a = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    let b = encoder_forward(&shuffled, &m, ForwardOptions::default()).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        for (x, y) in b
            .representations
            .row(i)
            .iter()
            .zip(a.representations.row(src))
        {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(b.records[1].topk[i], a.records[1].topk[src]);
    }
}

#[test]
fn padded_keys_are_ignored() {
    let m = model(BackboneConfig::tiny(), 17);
    let mut seq = embed_and_pack(&window(1, 64, 16, 18), &m, None).unwrap();
    seq.pad_mask[0] = true;
    let a = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    seq.tokens.row_mut(0).fill(123.0);
    let b = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    for t in 1..seq.n_tokens() {
        for (x, y) in a
            .representations
            .row(t)
            .iter()
            .zip(b.representations.row(t))
        {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let m = model(BackboneConfig::tiny(), 19);
    let seq = embed_and_pack(&window(2, 64, 16, 20), &m, None).unwrap();
    let a = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    let b = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    assert_eq!(a.representations, b.representations);
    assert_eq!(a.records, b.records);
}

#[test]
fn forecast_shape_and_destandardization() {
    let m = ModelState::<f64>::init(BackboneConfig::tiny(), GateParams::default(), 21).unwrap();
    let w = window(2, 70, 20, 22);
    let y = forecast(&m, &w).unwrap();
    assert_eq!(y.len(), 2);
    assert!(y
        .iter()
        .all(|v| v.len() == 20 && v.iter().all(|x| x.is_finite())));

    let (norm, stats) = crate::series::standardize_window(&w);
    let seq = embed_and_pack(&norm, &m, None).unwrap();
    let pass = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    let z = horizon_predictions(&seq, &pass.predictions);
    for v in 0..2 {
        for (a, b) in stats.denormalize(v, &z[v]).iter().zip(&y[v]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn forecast_ignores_gate_parameters() {
    let mut m = ModelState::<f64>::init(BackboneConfig::tiny(), GateParams::default(), 23).unwrap();
    let w = window(1, 64, 16, 24);
    let a = forecast(&m, &w).unwrap();
    m.gate[0] = 0.5;
    m.gate[1] = -7.0;
    assert_eq!(a, forecast(&m, &w).unwrap());
}

#[test]
fn additive_shift_examples() {
    use crate::prior::ExpertPrior;
    let m = model(BackboneConfig::tiny(), 25);
    let seq = embed_and_pack(&window(1, 64, 16, 26), &m, None).unwrap();
    let q = ExpertPrior {
        probs: vec![0.1, 0.2, 0.3, 0.15, 0.25],
        pi_shared: 0.25,
    };
    let zero = additive_prior_shift(&seq, std::slice::from_ref(&q), 0.0);
    let a = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    let b = encoder_forward(
        &seq,
        &m,
        ForwardOptions {
            prior_shift: Some(&zero),
            forced: None,
        },
    )
    .unwrap();
    assert_eq!(a.records, b.records);

    let onehot = ExpertPrior {
        probs: vec![0.0, 0.0, 0.0, 1.0, 0.0],
        pi_shared: 0.0,
    };
    let big = additive_prior_shift(&seq, std::slice::from_ref(&onehot), 1e3);
    let c = encoder_forward(
        &seq,
        &m,
        ForwardOptions {
            prior_shift: Some(&big),
            forced: None,
        },
    )
    .unwrap();
    assert!(c
        .records
        .iter()
        .all(|r| (0..r.n_tokens()).all(|t| r.top1(t) == 3)));

    // beta = 1: logits are raw router logits plus log(q + eps)
    let one = additive_prior_shift(&seq, std::slice::from_ref(&q), 1.0);
    let d = encoder_forward(
        &seq,
        &m,
        ForwardOptions {
            prior_shift: Some(&one),
            forced: None,
        },
    )
    .unwrap();
    let raw = d.router_inputs[0].dot(&m.layers[0].router);
    for t in 0..seq.n_tokens() {
        for e in 0..5 {
            let expect = raw[[t, e]] + (q.probs[e] + 1e-8).ln();
            assert!((d.records[0].logits[[t, e]] - expect).abs() < 1e-12);
        }
    }
}

/// Finite-difference check of the full reverse pass on a weighted sum of
/// head outputs.
#[test]
fn backward_matches_finite_differences() {
    let mut cfg = BackboneConfig::tiny();
    cfg.d_model = 8;
    cfg.expert_hidden = 12;
    cfg.max_tokens = 16;
    cfg.patch_len = 4;
    let m = model(cfg, 27);
    let w = window(2, 10, 5, 28);
    let mask = vec![vec![false, true, false], vec![false, false, true]];
    let seq = embed_and_pack(&w, &m, Some(&mask)).unwrap();
    let pass = encoder_forward(&seq, &m, ForwardOptions::default()).unwrap();
    let forced: Vec<Vec<Vec<usize>>> = pass.records.iter().map(|r| r.topk.clone()).collect();
    let coeff = rand_tokens(seq.n_tokens(), cfg.patch_len, 29);
    let loss = |mm: &ModelState<f64>| {
        let s = embed_and_pack(&w, mm, Some(&mask)).unwrap();
        let p = encoder_forward(
            &s,
            mm,
            ForwardOptions {
                prior_shift: None,
                forced: Some(&forced),
            },
        )
        .unwrap();
        (&p.predictions * &coeff).sum()
    };
    let mut grads = m.zeros_like();
    encoder_backward(&seq, &m, &pass, &coeff, &[], &mut grads).unwrap();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let names: Vec<(String, usize)> = m
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.len()))
        .collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (ti, (name, len)) in names.iter().enumerate() {
        if name == GATE_TENSOR {
            continue;
        }
        for _ in 0..4 {
            let i = rng.random_range(0..*len);
            let mut plus = m.clone();
            plus.tensors_mut()[ti].data[i] += h;
            let mut minus = m.clone();
            minus.tensors_mut()[ti].data[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[ti][i];
            let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-4);
            worst = worst.max(rel);
            assert!(rel < 1e-5, "{name}[{i}]: fd {fd} analytic {a}");
        }
    }
    assert!(worst < 1e-5);
}
