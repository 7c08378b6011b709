//! Per-sample classification losses. Reduction is left to the caller.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

fn check_labels(graph: &Graph, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = graph.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return shape_err(format!(
            "loss: {} labels for logits of shape {shape:?}",
            labels.len()
        ));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return invalid(format!("loss: label {bad} out of range for {c} classes"));
    }
    Ok((shape[0], c))
}

/// Per-sample `−w_y · log softmax(logits)_y`, shape `[b]`.
pub fn cross_entropy(
    graph: &mut Graph,
    logits: Var,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let (b, c) = check_labels(graph, logits, labels)?;
    if let Some(w) = class_weights {
        if w.len() != c {
            return shape_err(format!("cross_entropy: {} class weights for {c} classes", w.len()));
        }
    }
    let logp = graph.log_softmax(logits);
    let picked = graph.pick(logp, labels)?;
    let coeff: Vec<f64> = labels
        .iter()
        .map(|&y| -class_weights.map_or(1.0, |w| w[y]))
        .collect();
    graph.mul_const(picked, Tensor::new(vec![b], coeff)?)
}

/// Per-sample focal loss `(1 − p_t)^γ · (−log p_t)`.
pub fn focal_loss(graph: &mut Graph, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return invalid(format!("focal_loss: gamma must be non-negative, got {gamma}"));
    }
    check_labels(graph, logits, labels)?;
    let logp = graph.log_softmax(logits);
    let logp_t = graph.pick(logp, labels)?;
    let nll = graph.scale(logp_t, -1.0);
    if gamma == 0.0 {
        return Ok(nll);
    }
    let p_t = graph.exp(logp_t);
    let miss = graph.affine(p_t, -1.0, 1.0);
    let modulating = graph.powf(miss, gamma);
    graph.mul(modulating, nll)
}

/// Inverse-frequency class weights `N / (c · N_c)`; their mean over
/// classes is 1 when every class is present.
pub fn inverse_frequency_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return invalid("class weights: no classes");
    }
    if let Some(k) = class_counts.iter().position(|&n| n == 0) {
        return invalid(format!("class weights: class {k} has zero frequency"));
    }
    let total: usize = class_counts.iter().sum();
    let c = class_counts.len() as f64;
    Ok(class_counts
        .iter()
        .map(|&n| total as f64 / (c * n as f64))
        .collect())
}

/// Cross-entropy weighted by inverse class frequency.
pub fn weighted_ce_baseline(
    graph: &mut Graph,
    logits: Var,
    labels: &[usize],
    class_counts: &[usize],
) -> Result<Var> {
    let w = inverse_frequency_weights(class_counts)?;
    cross_entropy(graph, logits, labels, Some(&w))
}
