//! AdamW, warm-up + cosine learning-rate schedule, early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam step using the gradients currently
    /// stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let theta = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
            }
        }
    }
}

fn default_base_lr() -> f64 {
    1e-4
}
fn default_warmup() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Filled in by the trainer from epochs × batches when left at 0.
    #[serde(default)]
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: default_base_lr(),
            warmup_steps: default_warmup(),
            total_steps: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("schedule.base_lr must be positive, got {}", self.base_lr)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "schedule.warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then a cosine decay toward 0.
pub fn lr_at(step: usize, config: &ScheduleConfig) -> Result<f64> {
    if step >= config.total_steps {
        return invalid(format!("lr_at: step {step} outside 0..{}", config.total_steps));
    }
    let base = config.base_lr;
    let warm = config.warmup_steps;
    if step < warm {
        return Ok(base * (step + 1) as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (config.total_steps - warm) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping on validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub best_params: Option<ParamStore>,
    epochs_seen: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            patience,
            best_params: None,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's validation loss. A strictly lower loss resets
    /// the counter and snapshots `params`; anything else (ties and NaN
    /// included) counts toward the patience.
    pub fn update(&mut self, val_loss: f64, params: &ParamStore) -> StopDecision {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
            self.best_params = Some(params.clone());
        } else {
            if val_loss.is_nan() {
                log_nan(epoch);
            }
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

fn log_nan(epoch: usize) {
    eprintln!("early stopping: validation loss is NaN at epoch {epoch}; counted as no improvement");
}
