//! Slice encoder, sequence aggregator and classification head.
//!
//! A volume is a `[S, D_in]` stack of slice feature vectors. Every slice
//! goes through the same two-layer perceptron, the resulting `[S, d]`
//! sequence is pooled into one `[d]` vector (plain mean, or a small
//! pre-norm transformer encoder followed by a mean), and the head maps
//! that vector to class logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Transformer,
}

fn default_embed_dim() -> usize {
    32
}
fn default_slices() -> usize {
    16
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.3
}
fn default_eps() -> f64 {
    1e-5
}
fn default_aggregator() -> Aggregator {
    Aggregator::Transformer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_slices")]
    pub slices: usize,
    pub num_classes: usize,
    #[serde(default = "default_aggregator")]
    pub aggregator: Aggregator,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feed-forward width; `4 · embed_dim` when absent.
    #[serde(default)]
    pub ff_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    /// Encoder hidden width; `2 · embed_dim` when absent.
    #[serde(default)]
    pub encoder_hidden: Option<usize>,
    #[serde(default)]
    pub positional_encoding: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            embed_dim: default_embed_dim(),
            slices: default_slices(),
            num_classes,
            aggregator: default_aggregator(),
            layers: default_layers(),
            heads: default_heads(),
            ff_dim: None,
            dropout_p: default_dropout(),
            encoder_hidden: None,
            positional_encoding: false,
            layer_norm_eps: default_eps(),
        }
    }

    pub fn ff_width(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.embed_dim)
    }

    pub fn hidden_width(&self) -> usize {
        self.encoder_hidden.unwrap_or(2 * self.embed_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.embed_dim == 0 || self.slices == 0 {
            return bad("model: input_dim, embed_dim and slices must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("model.num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("model.dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad(format!("model.layer_norm_eps must be positive, got {}", self.layer_norm_eps));
        }
        if self.ff_width() == 0 || self.hidden_width() == 0 {
            return bad("model: ff_dim and encoder_hidden must be positive".into());
        }
        if self.aggregator == Aggregator::Transformer {
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return bad(format!(
                    "model.embed_dim ({}) must be divisible by model.heads ({})",
                    self.embed_dim, self.heads
                ));
            }
            if self.positional_encoding && self.embed_dim % 2 != 0 {
                return bad("model.positional_encoding needs an even embed_dim".into());
            }
        }
        Ok(())
    }
}

/// A batch of volumes with their labels and training groups.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBatch {
    /// `[b, S, D_in]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl VolumeBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        let s = features.shape();
        if s.len() != 3 || s[0] != labels.len() || s[0] != groups.len() {
            return shape_err(format!(
                "batch: features {s:?} with {} labels and {} groups",
                labels.len(),
                groups.len()
            ));
        }
        Ok(Self { features, labels, groups })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameter names and shapes in initialisation order. Weight matrices
/// are stored `[fan_in, fan_out]` and applied as `x · W`.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.weight"), vec![i, o]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    linear(&mut out, "encoder.fc1", config.input_dim, config.hidden_width());
    linear(&mut out, "encoder.fc2", config.hidden_width(), d);
    if config.aggregator == Aggregator::Transformer {
        for l in 0..config.layers {
            let p = format!("aggregator.layers.{l}");
            out.push((format!("{p}.ln1.gain"), vec![d]));
            out.push((format!("{p}.ln1.bias"), vec![d]));
            for proj in ["query", "key", "value", "output"] {
                linear(&mut out, &format!("{p}.attn.{proj}"), d, d);
            }
            out.push((format!("{p}.ln2.gain"), vec![d]));
            out.push((format!("{p}.ln2.bias"), vec![d]));
            linear(&mut out, &format!("{p}.ff1"), d, config.ff_width());
            linear(&mut out, &format!("{p}.ff2"), config.ff_width(), d);
        }
    }
    out.push(("head.ln.gain".into(), vec![d]));
    out.push(("head.ln.bias".into(), vec![d]));
    linear(&mut out, "head.linear", d, config.num_classes);
    out
}

pub fn count_params(config: &ModelConfig) -> usize {
    param_shapes(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(config) {
        let n: usize = shape.iter().product();
        let value = if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(shape, data)?
        };
        store.insert(name, value)?;
    }
    Ok(store)
}

fn linear(graph: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = graph.param_named(store, &format!("{name}.weight"))?;
    let b = graph.param_named(store, &format!("{name}.bias"))?;
    let xw = graph.matmul(x, w)?;
    graph.add_bias(xw, b)
}

fn layer_norm(graph: &mut Graph, store: &ParamStore, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = graph.param_named(store, &format!("{name}.gain"))?;
    let bias = graph.param_named(store, &format!("{name}.bias"))?;
    graph.layer_norm(x, gain, bias, eps)
}

/// Applies the shared slice encoder: `[b, S, D_in] → [b, S, d]`.
pub fn encode_slices(graph: &mut Graph, store: &ParamStore, config: &ModelConfig, features: Var) -> Result<Var> {
    let shape = graph.shape(features).to_vec();
    if shape.len() != 3 || shape[2] != config.input_dim {
        return shape_err(format!(
            "encode_slices: expected [b, S, {}], got {shape:?}",
            config.input_dim
        ));
    }
    let (b, s) = (shape[0], shape[1]);
    let rows = graph.reshape(features, &[b * s, config.input_dim])?;
    let h = linear(graph, store, "encoder.fc1", rows)?;
    let h = graph.relu(h);
    let e = linear(graph, store, "encoder.fc2", h)?;
    graph.reshape(e, &[b, s, config.embed_dim])
}

/// Sinusoidal encoding of slice position, `[S, d]`.
pub fn sinusoidal_positions(slices: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(slices * dim);
    for s in 0..slices {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = s as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![slices, dim], data).expect("consistent shape")
}

/// Pools `[b, S, d]` slice embeddings into `[b, d]` volume embeddings.
pub fn aggregate(graph: &mut Graph, store: &ParamStore, config: &ModelConfig, embeddings: Var) -> Result<Var> {
    let shape = graph.shape(embeddings).to_vec();
    if shape.len() != 3 || shape[2] != config.embed_dim {
        return shape_err(format!(
            "aggregate: expected [b, S, {}], got {shape:?}",
            config.embed_dim
        ));
    }
    if config.aggregator == Aggregator::Mean {
        return graph.mean_axis(embeddings, 1);
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let mut x = embeddings;
    if config.positional_encoding {
        let pe = sinusoidal_positions(s, d);
        let tiled: Vec<f64> = (0..b).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = graph.constant(Tensor::new(vec![b, s, d], tiled)?);
        x = graph.add(x, pe)?;
    }
    let mut x = graph.reshape(x, &[b * s, d])?;
    let eps = config.layer_norm_eps;
    for l in 0..config.layers {
        let p = format!("aggregator.layers.{l}");
        let h = layer_norm(graph, store, &format!("{p}.ln1"), x, eps)?;
        let attn = self_attention(graph, store, config, &format!("{p}.attn"), h, b, s)?;
        x = graph.add(x, attn)?;
        let h = layer_norm(graph, store, &format!("{p}.ln2"), x, eps)?;
        let f = linear(graph, store, &format!("{p}.ff1"), h)?;
        let f = graph.relu(f);
        let f = linear(graph, store, &format!("{p}.ff2"), f)?;
        x = graph.add(x, f)?;
    }
    let x = graph.reshape(x, &[b, s, d])?;
    graph.mean_axis(x, 1)
}

/// Multi-head self-attention over rows `[b·S, d]`, no masking.
fn self_attention(
    graph: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    name: &str,
    x: Var,
    b: usize,
    s: usize,
) -> Result<Var> {
    let (d, h) = (config.embed_dim, config.heads);
    let dh = d / h;
    let split = |graph: &mut Graph, proj: &str| -> Result<Var> {
        let y = linear(graph, store, &format!("{name}.{proj}"), x)?;
        let y = graph.reshape(y, &[b, s, h, dh])?;
        let y = graph.permute(y, &[0, 2, 1, 3])?;
        graph.reshape(y, &[b * h, s, dh])
    };
    let q = split(graph, "query")?;
    let k = split(graph, "key")?;
    let v = split(graph, "value")?;
    let scores = graph.batch_matmul(q, k, true)?;
    let scores = graph.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = graph.softmax(scores);
    let ctx = graph.batch_matmul(attn, v, false)?;
    let ctx = graph.reshape(ctx, &[b, h, s, dh])?;
    let ctx = graph.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = graph.reshape(ctx, &[b * s, d])?;
    linear(graph, store, &format!("{name}.output"), ctx)
}

/// Inverted dropout: in train mode each entry is zeroed with probability
/// `p` and survivors are scaled by `1/(1−p)`; otherwise the identity.
pub fn dropout<R: Rng + ?Sized>(graph: &mut Graph, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
    if !train || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = graph.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    graph.mul_const(x, Tensor::new(shape, mask)?)
}

/// Head input after layer norm and dropout, `[b, d]`.
pub fn head_features<R: Rng + ?Sized>(
    graph: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    z: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = layer_norm(graph, store, "head.ln", z, config.layer_norm_eps)?;
    dropout(graph, h, config.dropout_p, train, rng)
}

/// `[b, d] → [b, num_classes]` logits.
pub fn classify<R: Rng + ?Sized>(
    graph: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    z: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = head_features(graph, store, config, z, train, rng)?;
    linear(graph, store, "head.linear", h)
}

/// Full pipeline on a `[b, S, D_in]` feature tensor.
pub fn forward<R: Rng + ?Sized>(
    graph: &mut Graph,
    store: &ParamStore,
    config: &ModelConfig,
    features: &Tensor,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let s = features.shape();
    if s.len() != 3 || s[1] != config.slices || s[2] != config.input_dim {
        return shape_err(format!(
            "forward: expected [b, {}, {}], got {s:?}",
            config.slices, config.input_dim
        ));
    }
    let x = graph.constant(features.clone());
    let e = encode_slices(graph, store, config, x)?;
    let z = aggregate(graph, store, config, e)?;
    classify(graph, store, config, z, train, rng)
}

/// Eval-mode logits as a plain tensor.
pub fn predict_logits(store: &ParamStore, config: &ModelConfig, features: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = forward(&mut graph, store, config, features, false, &mut rng)?;
    Ok(graph.value(logits).clone())
}
