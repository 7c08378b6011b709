//! Finite-difference gradient checks shared by the core tests and the
//! acceptance suite. Each case panics when its check fails.

use grdo_core::autodiff::{Graph, Var};
use grdo_core::gradcheck::{finite_diff_check, GradCheckReport};
use grdo_core::losses::{cross_entropy, focal_loss};
use grdo_core::model::{forward, init_params, Aggregator, ModelConfig};
use grdo_core::robust::{group_loss_nodes, total_loss, GroupWeights};
use grdo_core::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Uniform entries in ±[0.1, 1], clear of the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.2..1.5)).collect()).unwrap()
}

/// Contracts any output with fixed random weights, so that no coordinate
/// of the gradient vanishes by symmetry.
fn project(graph: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = graph.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = away_from_zero(&mut rng, &shape);
    let p = graph.mul_const(y, w)?;
    Ok(graph.sum(p))
}

fn check<F>(store: &mut ParamStore, f: F) -> GradCheckReport
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let report = finite_diff_check(store, STEP, f).unwrap();
    assert!(
        report.max_relative_error < TOL,
        "max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
    assert!(report.coordinates > 0);
    report
}

fn store(tensors: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in tensors {
        s.insert(n, t).unwrap();
    }
    s
}

pub fn matmul() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut s = store(vec![("a", away_from_zero(&mut r, &[3, 4])), ("b", away_from_zero(&mut r, &[4, 2]))]);
    check(&mut s, |s, g| {
        let (a, b) = (g.param_named(s, "a")?, g.param_named(s, "b")?);
        let y = g.matmul(a, b)?;
        project(g, y, 10)
    });
}

pub fn batch_matmul_both_layouts() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut s = store(vec![
        ("a", away_from_zero(&mut r, &[2, 3, 4])),
        ("b", away_from_zero(&mut r, &[2, 4, 5])),
        ("c", away_from_zero(&mut r, &[2, 5, 4])),
    ]);
    check(&mut s, |s, g| {
        let (a, b, c) = (g.param_named(s, "a")?, g.param_named(s, "b")?, g.param_named(s, "c")?);
        let y = g.batch_matmul(a, b, false)?;
        let z = g.batch_matmul(a, c, true)?;
        let py = project(g, y, 11)?;
        let pz = project(g, z, 12)?;
        g.add(py, pz)
    });
}

pub fn add_mul_bias_and_constants() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut s = store(vec![
        ("x", away_from_zero(&mut r, &[3, 4])),
        ("y", away_from_zero(&mut r, &[3, 4])),
        ("b", away_from_zero(&mut r, &[4])),
    ]);
    check(&mut s, |s, g| {
        let (x, y, b) = (g.param_named(s, "x")?, g.param_named(s, "y")?, g.param_named(s, "b")?);
        let sum = g.add(x, y)?;
        let prod = g.mul(sum, x)?;
        let biased = g.add_bias(prod, b)?;
        let masked = g.mul_const(biased, Tensor::full(&[3, 4], 1.7))?;
        let aff = g.affine(masked, -0.6, 0.25);
        let scaled = g.scale(aff, 1.3);
        project(g, scaled, 13)
    });
}

pub fn elementwise_nonlinearities() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut s = store(vec![("x", away_from_zero(&mut r, &[5, 3])), ("p", positive(&mut r, &[5, 3]))]);
    check(&mut s, |s, g| {
        let (x, p) = (g.param_named(s, "x")?, g.param_named(s, "p")?);
        let relu = g.relu(x);
        let e = g.exp(x);
        let pw = g.powf(p, 1.7);
        let a = project(g, relu, 14)?;
        let b = project(g, e, 15)?;
        let c = project(g, pw, 16)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    });
}

pub fn layer_norm() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut s = store(vec![
        ("x", away_from_zero(&mut r, &[4, 6])),
        ("gain", positive(&mut r, &[6])),
        ("bias", away_from_zero(&mut r, &[6])),
    ]);
    check(&mut s, |s, g| {
        let (x, gain, bias) = (g.param_named(s, "x")?, g.param_named(s, "gain")?, g.param_named(s, "bias")?);
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        project(g, y, 17)
    });
}

pub fn softmax_and_log_softmax() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut s = store(vec![("x", away_from_zero(&mut r, &[3, 5]))]);
    check(&mut s, |s, g| {
        let x = g.param_named(s, "x")?;
        let sm = g.softmax(x);
        let ls = g.log_softmax(x);
        let a = project(g, sm, 18)?;
        let b = project(g, ls, 19)?;
        g.add(a, b)
    });
}

pub fn reshape_permute_and_reductions() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut s = store(vec![("x", away_from_zero(&mut r, &[2, 3, 4]))]);
    check(&mut s, |s, g| {
        let x = g.param_named(s, "x")?;
        let p = g.permute(x, &[2, 0, 1])?;
        let m = g.mean_axis(p, 1)?;
        let flat = g.reshape(m, &[12])?;
        let a = project(g, flat, 20)?;
        let rows = g.reshape(x, &[6, 4])?;
        let picked = g.pick(rows, &[0, 3, 1, 2, 2, 0])?;
        let b = project(g, picked, 21)?;
        let seg = g.segment_mean(picked, &[1, 0, 1, 2, 0, 1], 4)?;
        let c = g.dot_const(seg, &[0.3, -1.1, 0.7, 2.0])?;
        let total = g.sum(x);
        let mean = g.mean(x);
        let ab = g.add(a, b)?;
        let abc = g.add(ab, c)?;
        let t = g.affine(total, 0.1, 0.0);
        let abct = g.add(abc, t)?;
        g.add(abct, mean)
    });
}

pub fn losses_and_group_objective() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut s = store(vec![("logits", away_from_zero(&mut r, &[6, 4]))]);
    let labels = [0usize, 3, 1, 1, 2, 0];
    let groups = [0usize, 1, 1, 2, 0, 2];
    let weights = GroupWeights::new(vec![0.5, 0.2, 0.3]).unwrap();
    check(&mut s, |s, g| {
        let logits = g.param_named(s, "logits")?;
        let weighted = cross_entropy(g, logits, &labels, Some(&[0.5, 2.0, 1.0, 1.5]))?;
        let focal = focal_loss(g, logits, &labels, 2.0)?;
        let plain = cross_entropy(g, logits, &labels, None)?;
        let nodes = group_loss_nodes(g, plain, &groups, 3)?;
        let dro = total_loss(g, nodes, &weights, 0.3)?;
        let a = g.mean(weighted);
        let b = g.mean(focal);
        let ab = g.add(a, b)?;
        g.add(ab, dro)
    });
}

fn tiny_model(aggregator: Aggregator) -> ModelConfig {
    let mut c = ModelConfig::new(3, 3);
    c.embed_dim = 4;
    c.slices = 3;
    c.heads = 2;
    c.layers = 1;
    c.aggregator = aggregator;
    c
}

fn model_loss_check(config: ModelConfig, gdro: bool) {
    let mut params = init_params(&config, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    // Non-zero biases so that no path is trivially symmetric.
    for p in params.iter_mut() {
        if p.name.ends_with(".bias") {
            let shape = p.value.shape().to_vec();
            p.value = away_from_zero(&mut r, &shape).map(|v| 0.1 * v);
        }
    }
    let features = away_from_zero(&mut r, &[2, config.slices, config.input_dim]);
    let labels = [2usize, 0];
    let groups = [1usize, 0];
    check(&mut params, |s, g| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let logits = forward(g, s, &config, &features, true, &mut rng)?;
        let ce = cross_entropy(g, logits, &labels, None)?;
        if gdro {
            let nodes = group_loss_nodes(g, ce, &groups, 2)?;
            total_loss(g, nodes, &GroupWeights::new(vec![0.35, 0.65])?, 0.5)
        } else {
            Ok(g.mean(ce))
        }
    });
}

pub fn full_transformer_model_loss() {
    model_loss_check(tiny_model(Aggregator::Transformer), false);
}

pub fn full_transformer_model_gdro_loss() {
    let mut c = tiny_model(Aggregator::Transformer);
    c.positional_encoding = true;
    model_loss_check(c, true);
}

pub fn full_mean_pool_model_loss() {
    model_loss_check(tiny_model(Aggregator::Mean), false);
}

#[allow(dead_code)]
pub const CASES: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("batch_matmul_both_layouts", batch_matmul_both_layouts),
    ("add_mul_bias_and_constants", add_mul_bias_and_constants),
    ("elementwise_nonlinearities", elementwise_nonlinearities),
    ("layer_norm", layer_norm),
    ("softmax_and_log_softmax", softmax_and_log_softmax),
    ("reshape_permute_and_reductions", reshape_permute_and_reductions),
    ("losses_and_group_objective", losses_and_group_objective),
    ("full_transformer_model_loss", full_transformer_model_loss),
    ("full_transformer_model_gdro_loss", full_transformer_model_gdro_loss),
    ("full_mean_pool_model_loss", full_mean_pool_model_loss),
];
