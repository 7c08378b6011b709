use grdo_core::autodiff::Graph;
use grdo_core::model::{
    aggregate, classify, count_params, dropout, encode_slices, forward, head_features, init_params, param_shapes,
    predict_logits, Aggregator, ModelConfig,
};
use grdo_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(store: &mut ParamStore, name: &str, data: &[f64]) {
    let p = store.by_name_mut(name).unwrap_or_else(|| panic!("missing {name}"));
    assert_eq!(p.value.len(), data.len(), "{name}");
    p.value.data_mut().copy_from_slice(data);
}

fn random_volume(rng: &mut ChaCha8Rng, b: usize, s: usize, d: usize) -> Tensor {
    Tensor::new(vec![b, s, d], (0..b * s * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// `x · W + b` with `W` stored `[in, out]` row-major.
fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

fn norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
        .collect()
}

#[test]
fn encoder_matches_hand_arithmetic() {
    let mut cfg = ModelConfig::new(2, 2);
    cfg.embed_dim = 2;
    cfg.encoder_hidden = Some(2);
    cfg.slices = 1;
    cfg.aggregator = Aggregator::Mean;
    let mut store = init_params(&cfg, 0).unwrap();
    set(&mut store, "encoder.fc1.weight", &[1.0, -1.0, 2.0, 0.5]);
    set(&mut store, "encoder.fc1.bias", &[0.5, -0.25]);
    set(&mut store, "encoder.fc2.weight", &[1.0, 2.0, -3.0, 1.0]);
    set(&mut store, "encoder.fc2.bias", &[0.1, -0.2]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
    let e = encode_slices(&mut g, &store, &cfg, x).unwrap();
    // h = relu([1·1 + 2·2 + 0.5, 1·(−1) + 2·0.5 − 0.25]) = relu([5.5, −0.25]) = [5.5, 0]
    // out = [5.5·1 + 0·(−3) + 0.1, 5.5·2 + 0·1 − 0.2] = [5.6, 10.8]
    let got = g.value(e).data();
    assert_eq!(g.shape(e), &[1, 1, 2]);
    assert!((got[0] - 5.6).abs() < 1e-12 && (got[1] - 10.8).abs() < 1e-12, "{got:?}");
}

#[test]
fn shared_encoder_duplicates_and_permutes_rows() {
    let mut cfg = ModelConfig::new(3, 2);
    cfg.embed_dim = 4;
    cfg.slices = 3;
    let store = init_params(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vol = random_volume(&mut rng, 1, 3, 3);
    let first: Vec<f64> = vol.data()[0..3].to_vec();
    vol.data_mut()[6..9].copy_from_slice(&first);
    let mut g = Graph::new();
    let x = g.constant(vol.clone());
    let e = encode_slices(&mut g, &store, &cfg, x).unwrap();
    let rows = g.value(e).data().to_vec();
    assert_eq!(rows[0..4], rows[8..12]);

    let perm = [2usize, 0, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&s| vol.data()[s * 3..s * 3 + 3].to_vec()).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3, 3], permuted).unwrap());
    let e = encode_slices(&mut g, &store, &cfg, x).unwrap();
    let prow = g.value(e).data();
    for (i, &s) in perm.iter().enumerate() {
        assert_eq!(prow[i * 4..i * 4 + 4], rows[s * 4..s * 4 + 4]);
    }
}

#[test]
fn transformer_layer_matches_step_by_step_oracle() {
    let mut cfg = ModelConfig::new(2, 2);
    cfg.embed_dim = 2;
    cfg.slices = 2;
    cfg.heads = 1;
    cfg.layers = 1;
    cfg.ff_dim = Some(3);
    let mut store = init_params(&cfg, 0).unwrap();
    let p = "aggregator.layers.0";
    let ln1 = ([1.2, 0.8], [0.1, -0.1]);
    let wq = [0.5, -0.3, 0.2, 0.9];
    let wk = [-0.4, 0.6, 1.1, 0.2];
    let wv = [0.7, 0.1, -0.5, 0.3];
    let wo = [1.0, -0.2, 0.4, 0.6];
    let (bq, bk, bv, bo) = ([0.05, -0.02], [0.0, 0.1], [0.2, -0.1], [0.03, 0.04]);
    let ln2 = ([0.9, 1.1], [-0.05, 0.2]);
    let w1 = [0.3, -0.7, 0.5, 0.8, 0.1, -0.6];
    let b1 = [0.1, 0.2, -0.3];
    let w2 = [0.4, -0.1, 0.2, 0.9, -0.5, 0.3];
    let b2 = [0.01, -0.02];
    set(&mut store, &format!("{p}.ln1.gain"), &ln1.0);
    set(&mut store, &format!("{p}.ln1.bias"), &ln1.1);
    for (proj, w, b) in [("query", &wq, &bq), ("key", &wk, &bk), ("value", &wv, &bv), ("output", &wo, &bo)] {
        set(&mut store, &format!("{p}.attn.{proj}.weight"), w);
        set(&mut store, &format!("{p}.attn.{proj}.bias"), b);
    }
    set(&mut store, &format!("{p}.ln2.gain"), &ln2.0);
    set(&mut store, &format!("{p}.ln2.bias"), &ln2.1);
    set(&mut store, &format!("{p}.ff1.weight"), &w1);
    set(&mut store, &format!("{p}.ff1.bias"), &b1);
    set(&mut store, &format!("{p}.ff2.weight"), &w2);
    set(&mut store, &format!("{p}.ff2.bias"), &b2);

    let x = [[0.3, -1.2], [1.5, 0.4]];
    let eps = cfg.layer_norm_eps;
    let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &ln1.0, &ln1.1, eps)).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| dense(r, &wq, &bq)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| dense(r, &wk, &bk)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| dense(r, &wv, &bv)).collect();
    let scale = 1.0 / 2f64.sqrt();
    let mut after_attn = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| scale * (q[i][0] * k[j][0] + q[i][1] * k[j][1])).collect();
        let m = s[0].max(s[1]);
        let z = (s[0] - m).exp() + (s[1] - m).exp();
        let a = [(s[0] - m).exp() / z, (s[1] - m).exp() / z];
        let ctx = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
        let o = dense(&ctx, &wo, &bo);
        after_attn.push([x[i][0] + o[0], x[i][1] + o[1]]);
    }
    let mut out = Vec::new();
    for r in &after_attn {
        let n = norm(r, &ln2.0, &ln2.1, eps);
        let f: Vec<f64> = dense(&n, &w1, &b1).into_iter().map(relu).collect();
        let f = dense(&f, &w2, &b2);
        out.push([r[0] + f[0], r[1] + f[1]]);
    }
    let pooled = [(out[0][0] + out[1][0]) / 2.0, (out[0][1] + out[1][1]) / 2.0];

    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, 2, 2], vec![x[0][0], x[0][1], x[1][0], x[1][1]]).unwrap());
    let z = aggregate(&mut g, &store, &cfg, e).unwrap();
    let got = g.value(z).data();
    assert_eq!(g.shape(z), &[1, 2]);
    for j in 0..2 {
        assert!((got[j] - pooled[j]).abs() < 1e-12, "{got:?} vs {pooled:?}");
    }
}

#[test]
fn aggregation_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (aggregator, tol) in [(Aggregator::Mean, 1e-12), (Aggregator::Transformer, 1e-10)] {
        let mut cfg = ModelConfig::new(4, 3);
        cfg.embed_dim = 8;
        cfg.slices = 5;
        cfg.aggregator = aggregator;
        let store = init_params(&cfg, 11).unwrap();
        let vol = random_volume(&mut rng, 2, 5, 4);
        let perm = [3usize, 0, 4, 1, 2];
        let mut shuffled = Vec::new();
        for b in 0..2 {
            for &s in &perm {
                let at = (b * 5 + s) * 4;
                shuffled.extend_from_slice(&vol.data()[at..at + 4]);
            }
        }
        let a = predict_logits(&store, &cfg, &vol).unwrap();
        let b = predict_logits(&store, &cfg, &Tensor::new(vec![2, 5, 4], shuffled).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < tol, "{aggregator:?}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn mean_aggregation_of_identical_slices_is_that_slice() {
    let mut cfg = ModelConfig::new(2, 2);
    cfg.embed_dim = 3;
    cfg.aggregator = Aggregator::Mean;
    let store = init_params(&cfg, 0).unwrap();
    let row = [0.2, -0.7, 1.3];
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, 4, 3], row.repeat(4)).unwrap());
    let z = aggregate(&mut g, &store, &cfg, e).unwrap();
    for (a, b) in g.value(z).data().iter().zip(row) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn eval_mode_is_deterministic_and_shape_is_batch_by_classes() {
    let mut cfg = ModelConfig::new(4, 4);
    cfg.embed_dim = 8;
    cfg.slices = 6;
    let store = init_params(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in [1, 3, 7] {
        let vol = random_volume(&mut rng, b, 6, 4);
        let x = predict_logits(&store, &cfg, &vol).unwrap();
        let y = predict_logits(&store, &cfg, &vol).unwrap();
        assert_eq!(x.shape(), &[b, 4]);
        assert_eq!(x, y);
    }
}

#[test]
fn zero_dropout_makes_train_and_eval_agree() {
    let mut cfg = ModelConfig::new(4, 2);
    cfg.embed_dim = 8;
    cfg.slices = 3;
    cfg.dropout_p = 0.0;
    let store = init_params(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vol = random_volume(&mut rng, 2, 3, 4);
    let mut g = Graph::new();
    let train = forward(&mut g, &store, &cfg, &vol, true, &mut rng).unwrap();
    let train = g.value(train).clone();
    assert_eq!(train, predict_logits(&store, &cfg, &vol).unwrap());
}

#[test]
fn dropout_expectation_matches_eval_activation() {
    let mut cfg = ModelConfig::new(2, 2);
    cfg.embed_dim = 6;
    cfg.heads = 2;
    let store = init_params(&cfg, 0).unwrap();
    let z = Tensor::new(vec![1, 6], vec![0.4, -1.2, 2.0, 0.1, -0.3, 0.9]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let eval = head_features(&mut g, &store, &cfg, zv, false, &mut rng).unwrap();
    let eval = g.value(eval).data().to_vec();
    let trials = 100_000;
    let mut sum = vec![0.0; 6];
    let mut zeros = 0usize;
    for _ in 0..trials {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let h = head_features(&mut g, &store, &cfg, zv, true, &mut rng).unwrap();
        for (s, v) in sum.iter_mut().zip(g.value(h).data()) {
            *s += v;
            zeros += usize::from(*v == 0.0);
        }
    }
    for (s, e) in sum.iter().zip(&eval) {
        assert!((s / trials as f64 - e).abs() < 1e-2, "{} vs {e}", s / trials as f64);
    }
    let rate = zeros as f64 / (6 * trials) as f64;
    assert!((rate - 0.3).abs() < 5e-3, "drop rate {rate}");

    let mut g = Graph::new();
    let x = g.constant(z.clone());
    let y = dropout(&mut g, x, 0.3, false, &mut rng).unwrap();
    assert_eq!(g.value(y), &z);
}

#[test]
fn classify_eval_is_deterministic() {
    let cfg = ModelConfig::new(4, 2);
    let store = init_params(&cfg, 1).unwrap();
    let z = Tensor::new(vec![2, 32], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mut out = Vec::new();
    for _ in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = classify(&mut g, &store, &cfg, zv, false, &mut rng).unwrap();
        out.push(g.value(l).clone());
    }
    assert_eq!(out[0], out[1]);
}

/// Hand census of the default desk model (d=32, D_in=16, L=2, h=4, 2 classes):
/// encoder 16·64+64 + 64·32+32 = 3168; per layer 2·(2·32) + 4·(32·32+32)
/// + (32·128+128) + (128·32+32) = 12 704; head 2·32 + 32·2+2 = 130.
#[test]
fn parameter_census() {
    let desk = ModelConfig::new(16, 2);
    let encoder = (16 * 64 + 64) + (64 * 32 + 32);
    let layer = 2 * (2 * 32) + 4 * (32 * 32 + 32) + (32 * 128 + 128) + (128 * 32 + 32);
    let head = 2 * 32 + (32 * 2 + 2);
    assert_eq!(encoder + 2 * layer + head, 28_706);
    assert_eq!(count_params(&desk), 28_706);
    assert!(count_params(&desk) < 100_000);
    assert_eq!(init_params(&desk, 0).unwrap().count(), 28_706);

    let mut full_width = ModelConfig::new(16, 4);
    full_width.embed_dim = 320;
    let aggregator_and_head: usize = param_shapes(&full_width)
        .iter()
        .filter(|(n, _)| !n.starts_with("encoder."))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let d = 320;
    let by_hand = 2 * (4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)) + 2 * d + d * 4 + 4;
    assert_eq!(aggregator_and_head, by_hand);
    assert!(aggregator_and_head < 3_500_000, "{aggregator_and_head}");
}
