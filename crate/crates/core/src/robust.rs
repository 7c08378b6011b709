//! Group DRO: per-group losses, exponentiated-gradient group weights with
//! an optional KL pull toward uniform, and the weighted training loss.
//!
//! Group weights live on the probability simplex and are updated from
//! *detached* per-group losses (plain `f64`s, never graph nodes). Model
//! gradients flow only through `Σ_g w_g ℓ_g`, with `w` held constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};

/// Tolerance used when validating that an incoming state is on the simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Bound applied to the modified losses of [`UpdateMode::KlGradient`].
pub const KL_GRADIENT_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    w: Vec<f64>,
}

impl GroupWeights {
    pub fn uniform(num_groups: usize) -> Self {
        assert!(num_groups > 0, "at least one group is required");
        Self {
            w: vec![1.0 / num_groups as f64; num_groups],
        }
    }

    /// Wraps an explicit weight vector after checking it lies on the simplex.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let gw = Self { w };
        gw.check_simplex()?;
        Ok(gw)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn num_groups(&self) -> usize {
        self.w.len()
    }

    pub fn check_simplex(&self) -> Result<()> {
        if self.w.is_empty() {
            return invalid("group weights: empty");
        }
        if let Some(v) = self.w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return invalid(format!("group weights: entry {v} is not a non-negative number"));
        }
        let sum: f64 = self.w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return invalid(format!("group weights: sum is {sum}, not 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// `w_g ∝ w_g · exp(η ℓ_g)`.
    VanillaEg,
    /// Mirror-ascent step on `⟨ℓ, w⟩ − α KL(w ‖ u)`:
    /// `w_g ∝ w_g^β u_g^(1−β) exp(β η ℓ_g)`, `β = 1 / (1 + η α)`.
    KlMirror,
    /// Vanilla step on `ℓ_g − α (log(w_g / u_g) + 1)`, clamped.
    KlGradient,
}

fn default_eta() -> f64 {
    0.01
}
fn default_mode() -> UpdateMode {
    UpdateMode::KlMirror
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroConfig {
    #[serde(default = "default_eta")]
    pub eta_dro: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_mode")]
    pub update_mode: UpdateMode,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            eta_dro: default_eta(),
            alpha: 0.0,
            update_mode: default_mode(),
        }
    }
}

impl DroConfig {
    pub fn new(eta_dro: f64, alpha: f64, update_mode: UpdateMode) -> Self {
        Self { eta_dro, alpha, update_mode }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_dro >= 0.0) || !self.eta_dro.is_finite() {
            return Err(Error::Config(format!("dro.eta_dro must be non-negative, got {}", self.eta_dro)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("dro.alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Detached per-group mean losses for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLossReport {
    pub losses: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GroupLossReport {
    pub fn num_groups(&self) -> usize {
        self.losses.len()
    }
}

/// Per-group means of per-sample losses; absent groups report 0.
pub fn group_losses(per_sample: &[f64], groups: &[usize], num_groups: usize) -> Result<GroupLossReport> {
    if per_sample.len() != groups.len() {
        return invalid(format!(
            "group_losses: {} losses but {} group ids",
            per_sample.len(),
            groups.len()
        ));
    }
    let mut sums = vec![0.0; num_groups];
    let mut counts = vec![0usize; num_groups];
    for (&l, &g) in per_sample.iter().zip(groups) {
        if g >= num_groups {
            return invalid(format!("group_losses: group id {g} out of range for {num_groups} groups"));
        }
        sums[g] += l;
        counts[g] += 1;
    }
    let losses = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(GroupLossReport { losses, counts })
}

/// Differentiable per-group means, `[num_groups]`.
pub fn group_loss_nodes(graph: &mut Graph, per_sample: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
    graph.segment_mean(per_sample, groups, num_groups)
}

/// One group-weight update from detached losses.
pub fn update_weights(state: &GroupWeights, report: &GroupLossReport, config: &DroConfig) -> Result<GroupWeights> {
    state.check_simplex()?;
    if report.num_groups() != state.num_groups() {
        return invalid(format!(
            "update_weights: {} group losses for {} weights",
            report.num_groups(),
            state.num_groups()
        ));
    }
    if let Some(l) = report.losses.iter().find(|l| !l.is_finite()) {
        return invalid(format!("update_weights: non-finite group loss {l}"));
    }
    let n = state.num_groups();
    let log_u = -(n as f64).ln();
    let eta = config.eta_dro;
    let log_w: Vec<f64> = state.w.iter().map(|w| w.ln()).collect();
    let scores: Vec<f64> = match config.update_mode {
        UpdateMode::VanillaEg => log_w
            .iter()
            .zip(&report.losses)
            .map(|(lw, l)| lw + eta * l)
            .collect(),
        UpdateMode::KlMirror => {
            let beta = 1.0 / (1.0 + eta * config.alpha);
            log_w
                .iter()
                .zip(&report.losses)
                .map(|(&lw, &l)| {
                    let pulled = if lw == f64::NEG_INFINITY { lw } else { beta * lw + (1.0 - beta) * log_u };
                    pulled + beta * eta * l
                })
                .collect()
        }
        UpdateMode::KlGradient => log_w
            .iter()
            .zip(&report.losses)
            .map(|(&lw, &l)| {
                let modified = l - config.alpha * (lw - log_u + 1.0);
                let modified = if modified.is_nan() {
                    KL_GRADIENT_CLAMP
                } else {
                    modified.clamp(-KL_GRADIENT_CLAMP, KL_GRADIENT_CLAMP)
                };
                lw + eta * modified
            })
            .collect(),
    };
    Ok(GroupWeights { w: normalise_log(&scores) })
}

fn normalise_log(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `KL(w ‖ u)` against the uniform distribution, with `0 · log 0 = 0`.
pub fn kl_divergence(weights: &GroupWeights) -> f64 {
    let n = weights.num_groups() as f64;
    weights
        .w
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * (w * n).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `Σ_g w_g ℓ_g + α KL(w ‖ u)` with `w` and the KL term as constants.
pub fn total_loss(graph: &mut Graph, group_losses: Var, weights: &GroupWeights, alpha: f64) -> Result<Var> {
    let weighted = graph.dot_const(group_losses, weights.as_slice())?;
    Ok(graph.affine(weighted, 1.0, alpha * kl_divergence(weights)))
}

/// Gender × class indexing for the eight-group fairness setting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointIndexing {
    /// `g = 4j + k`, a bijection onto `0..8`.
    #[default]
    Bijective,
    /// `g = 2j + k`; not injective, kept for compatibility.
    Literal,
}

pub fn group_index_task2(gender: usize, class_id: usize, indexing: JointIndexing) -> Result<usize> {
    if gender > 1 || class_id > 3 {
        return invalid(format!(
            "group index: gender {gender} / class {class_id} out of range (gender 0..2, class 0..4)"
        ));
    }
    Ok(match indexing {
        JointIndexing::Bijective => 4 * gender + class_id,
        JointIndexing::Literal => 2 * gender + class_id,
    })
}

/// One line of the per-step weight trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub step: usize,
    pub w: Vec<f64>,
    pub group_losses: Vec<f64>,
    pub kl: f64,
}
