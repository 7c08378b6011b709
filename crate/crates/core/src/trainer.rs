//! Training loop, α sweeps and objective comparisons.
//!
//! Per batch: forward → per-sample losses → per-group losses → group-weight
//! update (GDRO only, from detached values) → total loss with the updated
//! weights → backward → AdamW step.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::save_checkpoint;
use crate::data::{self, batch_iter, GenConfig, GroupedDataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, focal_loss, inverse_frequency_weights};
use crate::metrics::{dataset_logits, report_from_logits, MetricsReport};
use crate::model::{forward, init_params, ModelConfig};
use crate::optim::{lr_at, AdamWConfig, AdamWState, EarlyStopState, ScheduleConfig, StopDecision};
use crate::params::ParamStore;
use crate::robust::{
    group_loss_nodes, group_losses, kl_divergence, total_loss, update_weights, DroConfig, GroupWeights,
    WeightRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Gdro,
    Wce,
    Focal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generate both splits in memory.
    Generate(GenConfig),
    /// Read previously generated JSONL files.
    Files {
        train: PathBuf,
        val: PathBuf,
        num_groups: usize,
    },
}

/// One (evaluation group, class) cell whose F1 is tracked separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub group: usize,
    pub class: usize,
}

fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5, 1.0]
}
fn default_gamma() -> Option<f64> {
    Some(2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: Objective,
    #[serde(default)]
    pub dro: Option<DroConfig>,
    #[serde(default = "default_gamma")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub class_weighting: ClassWeighting,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataSource,
    /// Sample attribute used for evaluation groups; inferred when absent.
    #[serde(default)]
    pub eval_attribute: Option<String>,
    #[serde(default)]
    pub minority_cell: Option<Cell>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        match self.objective {
            Objective::Gdro => match &self.dro {
                Some(d) => d.validate()?,
                None => return bad("dro: required when objective = gdro".into()),
            },
            Objective::Focal => match self.gamma {
                Some(g) if g >= 0.0 => {}
                _ => return bad("gamma: a non-negative value is required when objective = focal".into()),
            },
            Objective::Wce => {}
        }
        if self.batch_size == 0 {
            return bad("batch_size: must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs: must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience: must be at least 1".into());
        }
        if !(self.schedule.base_lr > 0.0) {
            return bad(format!("schedule.base_lr: must be positive, got {}", self.schedule.base_lr));
        }
        if let DataSource::Generate(g) = &self.data {
            g.validate()?;
            if g.classes != self.model.num_classes {
                return bad(format!(
                    "model.num_classes ({}) does not match data classes ({})",
                    self.model.num_classes, g.classes
                ));
            }
            if g.slices != self.model.slices || g.input_dim != self.model.input_dim {
                return bad("model.slices / model.input_dim do not match the data generator".into());
            }
        }
        Ok(())
    }

    /// The same run with a different objective (and α, for GDRO).
    pub fn with_objective(&self, objective: Objective, alpha: Option<f64>) -> Self {
        let mut c = self.clone();
        c.objective = objective;
        if let Some(a) = alpha {
            let mut d = c.dro.clone().unwrap_or_default();
            d.alpha = a;
            c.dro = Some(d);
        }
        c
    }
}

/// Train/val splits plus the number of training groups.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub num_groups: usize,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    match source {
        DataSource::Generate(g) => {
            let (train, val) = data::generate(g)?;
            Ok(LoadedData {
                train,
                val,
                num_groups: g.num_groups(),
            })
        }
        DataSource::Files { train, val, num_groups } => Ok(LoadedData {
            train: data::load(train)?,
            val: data::load(val)?,
            num_groups: *num_groups,
        }),
    }
}

fn eval_attribute(config: &RunConfig, data: &LoadedData) -> String {
    if let Some(a) = &config.eval_attribute {
        return a.clone();
    }
    if let Some(p) = &data.val.provenance {
        return p.regime.attribute().to_string();
    }
    let has_gender = data.val.samples.first().is_some_and(|s| s.attrs.contains_key("gender"));
    if has_gender { "gender" } else { "site" }.to_string()
}

/// Independent generator streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedStreams {
    pub init: u64,
    pub order: u64,
    pub dropout: u64,
}

impl SeedStreams {
    pub fn derive(seed: u64) -> Self {
        let draw = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r.next_u64()
        };
        Self {
            init: draw(1),
            order: draw(2),
            dropout: draw(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub group_losses: Vec<f64>,
    pub group_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub objective: Objective,
    /// Weight update happens before the gradient step within each batch.
    pub weight_update_order: String,
    pub steps: Vec<StepRecord>,
    pub weights: Vec<WeightRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub params: ParamStore,
    pub history: RunHistory,
    /// Validation metrics of the returned (best) parameters.
    pub metrics: MetricsReport,
    pub val_loss: f64,
}

/// Mean unweighted cross-entropy from plain logit rows.
pub fn mean_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / logits.len() as f64
}

pub fn train(config: &RunConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let data = load_data(&config.data)?;
    train_on(config, &data, seed)
}

/// Trains on already-loaded data.
pub fn train_on(config: &RunConfig, data: &LoadedData, seed: u64) -> Result<RunResult> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("data: training split is empty".into()));
    }
    let attribute = eval_attribute(config, data);
    let num_groups = data.num_groups;
    let num_classes = config.model.num_classes;
    if let Some(s) = data.train.samples.iter().chain(&data.val.samples).find(|s| s.group >= num_groups) {
        return Err(Error::Config(format!("data: group id {} but num_groups = {num_groups}", s.group)));
    }
    let streams = SeedStreams::derive(seed);
    let mut params = init_params(&config.model, streams.init)?;
    let mut adam = AdamWState::new(&params, config.adamw.clone());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(streams.dropout);

    let batches_per_epoch = data.train.len().div_ceil(config.batch_size);
    let mut schedule = config.schedule.clone();
    if schedule.total_steps == 0 {
        schedule.total_steps = config.max_epochs * batches_per_epoch;
    }
    schedule.validate()?;

    let class_weights = match (config.objective, config.class_weighting) {
        (Objective::Wce, ClassWeighting::InverseFrequency) => {
            Some(inverse_frequency_weights(&data.train.class_counts(num_classes))?)
        }
        _ => None,
    };
    let dro = config.dro.clone().unwrap_or_default();
    let mut weights = GroupWeights::uniform(num_groups);
    let mut early = EarlyStopState::new(config.patience);
    let mut history = RunHistory {
        seed,
        objective: config.objective,
        weight_update_order: "update_then_step".into(),
        steps: Vec::new(),
        weights: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let val_labels: Vec<usize> = data.val.samples.iter().map(|s| s.label).collect();

    let mut step = 0usize;
    for epoch in 0..config.max_epochs {
        let mut epoch_loss = 0.0;
        let batches = batch_iter(&data.train, config.batch_size, streams.order, epoch)?;
        let n_batches = batches.len();
        for batch in batches {
            if step >= schedule.total_steps {
                break;
            }
            let mut graph = Graph::new();
            let logits = forward(&mut graph, &params, &config.model, &batch.features, true, &mut dropout_rng)?;
            let ce = cross_entropy(&mut graph, logits, &batch.labels, None)?;
            let ce_values = graph.value(ce).data().to_vec();
            let report = group_losses(&ce_values, &batch.groups, num_groups)?;
            let root = match config.objective {
                Objective::Gdro => {
                    if let Some(l) = report.losses.iter().find(|l| !l.is_finite()) {
                        return Err(Error::Divergence { step, message: format!("group loss {l}") });
                    }
                    weights = update_weights(&weights, &report, &dro)?;
                    history.weights.push(WeightRecord {
                        step,
                        w: weights.as_slice().to_vec(),
                        group_losses: report.losses.clone(),
                        kl: kl_divergence(&weights),
                    });
                    let nodes = group_loss_nodes(&mut graph, ce, &batch.groups, num_groups)?;
                    total_loss(&mut graph, nodes, &weights, dro.alpha)?
                }
                Objective::Wce => {
                    let per = match &class_weights {
                        Some(w) => cross_entropy(&mut graph, logits, &batch.labels, Some(w))?,
                        None => ce,
                    };
                    graph.mean(per)
                }
                Objective::Focal => {
                    let per = focal_loss(&mut graph, logits, &batch.labels, config.gamma.unwrap_or(2.0))?;
                    graph.mean(per)
                }
            };
            let loss = graph.scalar(root);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, message: format!("loss {loss}") });
            }
            params.zero_grad();
            graph.backward(root, &mut params)?;
            let lr = lr_at(step, &schedule)?;
            adam.step(&mut params, lr);
            epoch_loss += loss;
            history.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                group_losses: report.losses,
                group_counts: report.counts,
            });
            step += 1;
        }

        let logits = dataset_logits(&params, &config.model, &data.val)?;
        let val_loss = mean_cross_entropy(&logits, &val_labels);
        let metrics = report_from_logits(num_classes, &data.val, &attribute, &logits)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_loss,
            metrics,
        });
        if early.update(val_loss, &params) == StopDecision::Stop {
            history.stopped_early = true;
            break;
        }
        if step >= schedule.total_steps {
            break;
        }
    }

    let best_epoch = early.best_epoch.unwrap_or(history.epochs.len().saturating_sub(1));
    history.best_epoch = best_epoch;
    let params = early.best_params.take().unwrap_or(params);
    let (metrics, val_loss) = match history.epochs.get(best_epoch) {
        Some(e) => (e.metrics.clone(), e.val_loss),
        None => {
            let logits = dataset_logits(&params, &config.model, &data.val)?;
            (
                report_from_logits(num_classes, &data.val, &attribute, &logits)?,
                mean_cross_entropy(&logits, &val_labels),
            )
        }
    };
    Ok(RunResult {
        params,
        history,
        metrics,
        val_loss,
    })
}

/// Writes `history.jsonl` (per step), `weights.jsonl` (GDRO trajectory),
/// `epochs.json`, `metrics.json`, `metrics.csv` and `best.ckpt` into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, result: &RunResult) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut steps = std::io::BufWriter::new(std::fs::File::create(dir.join("history.jsonl"))?);
    for s in &result.history.steps {
        serde_json::to_writer(&mut steps, s)?;
        steps.write_all(b"\n")?;
    }
    steps.flush()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("weights.jsonl"))?);
    for r in &result.history.weights {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct EpochSummary<'a> {
        seed: u64,
        objective: Objective,
        weight_update_order: &'a str,
        best_epoch: usize,
        stopped_early: bool,
        epochs: &'a [EpochRecord],
    }
    let summary = EpochSummary {
        seed: result.history.seed,
        objective: result.history.objective,
        weight_update_order: &result.history.weight_update_order,
        best_epoch: result.history.best_epoch,
        stopped_early: result.history.stopped_early,
        epochs: &result.history.epochs,
    };
    std::fs::write(dir.join("epochs.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(dir.join("metrics.json"), result.metrics.to_json()?)?;
    std::fs::write(dir.join("metrics.csv"), result.metrics.to_csv()?)?;
    save_checkpoint(&dir.join("best.ckpt"), &config.model, SeedStreams::derive(result.history.seed).init, &result.params)?;
    Ok(())
}

/// Outcome of one independent training cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub label: String,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub result: std::result::Result<MetricsReport, String>,
}

fn run_cells(
    data: &LoadedData,
    cells: Vec<(String, Option<f64>, RunConfig, u64)>,
    out: Option<&Path>,
) -> Vec<CellOutcome> {
    cells
        .into_par_iter()
        .map(|(label, alpha, cfg, seed)| {
            let result = train_on(&cfg, data, seed).and_then(|r| {
                if let Some(dir) = out {
                    write_run(&dir.join(&label).join(format!("seed_{seed}")), &cfg, &r)?;
                }
                Ok(r.metrics)
            });
            CellOutcome {
                result: result.map_err(|e| format!("run {label}/seed_{seed}: {e}")),
                label,
                alpha,
                seed,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<CellOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub alpha: f64,
    pub seeds: usize,
    pub failed: usize,
    pub mean_p: f64,
    pub std_p: f64,
    pub mean_worst_group: f64,
    pub std_worst_group: f64,
    pub mean_gap: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepTable {
    /// One row per (alpha, seed, evaluation group).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["alpha", "seed", "group", "macro_f1", "challenge_p", "worst_group_macro_f1", "status"])?;
        for c in &self.cells {
            let alpha = c.alpha.unwrap_or(f64::NAN).to_string();
            match &c.result {
                Ok(m) => {
                    for g in &m.groups {
                        w.write_record([
                            alpha.as_str(),
                            &c.seed.to_string(),
                            &g.group.to_string(),
                            &g.macro_f1.to_string(),
                            &m.challenge_p.to_string(),
                            &m.worst_group_macro_f1.to_string(),
                            "ok",
                        ])?;
                    }
                }
                Err(e) => {
                    w.write_record([alpha.as_str(), &c.seed.to_string(), "", "", "", "", &format!("failed: {e}")])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        let mut alphas: Vec<f64> = Vec::new();
        for c in &self.cells {
            let a = c.alpha.unwrap_or(f64::NAN);
            if !alphas.iter().any(|x| x.to_bits() == a.to_bits()) {
                alphas.push(a);
            }
        }
        alphas
            .into_iter()
            .map(|a| {
                let cells: Vec<&CellOutcome> =
                    self.cells.iter().filter(|c| c.alpha.unwrap_or(f64::NAN).to_bits() == a.to_bits()).collect();
                let ok: Vec<&MetricsReport> = cells.iter().filter_map(|c| c.result.as_ref().ok()).collect();
                let p: Vec<f64> = ok.iter().map(|m| m.challenge_p).collect();
                let worst: Vec<f64> = ok.iter().map(|m| m.worst_group_macro_f1).collect();
                let gap: Vec<f64> = ok.iter().map(|m| m.max_gap).collect();
                let (mean_p, std_p) = mean_std(&p);
                let (mean_worst_group, std_worst_group) = mean_std(&worst);
                SweepSummaryRow {
                    alpha: a,
                    seeds: cells.len(),
                    failed: cells.len() - ok.len(),
                    mean_p,
                    std_p,
                    mean_worst_group,
                    std_worst_group,
                    mean_gap: mean_std(&gap).0,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.summary() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

/// Trains GDRO once per (α, seed); failed cells are recorded, not fatal.
pub fn sweep_alpha(config: &RunConfig, alphas: &[f64], seeds: &[u64]) -> Result<SweepTable> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep: alphas and seeds must be non-empty".into()));
    }
    let data = load_data(&config.data)?;
    sweep_alpha_on(config, &data, alphas, seeds, None)
}

/// As [`sweep_alpha`]; when `out` is set each cell's run files go to
/// `out/<label>/seed_<seed>/`.
pub fn sweep_alpha_on(
    config: &RunConfig,
    data: &LoadedData,
    alphas: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SweepTable> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep: alphas and seeds must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &a in alphas {
        for &s in seeds {
            cells.push((format!("gdro_alpha_{a}"), Some(a), config.with_objective(Objective::Gdro, Some(a)), s));
        }
    }
    Ok(SweepTable { cells: run_cells(data, cells, out) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seeds: usize,
    pub failed: usize,
    pub mean_p: f64,
    pub std_p: f64,
    pub mean_worst_group: f64,
    pub std_worst_group: f64,
    pub mean_minority_cell: f64,
    pub std_minority_cell: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub cells: Vec<CellOutcome>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Method label used in comparison tables.
pub fn method_label(objective: Objective, alpha: Option<f64>) -> String {
    match objective {
        Objective::Wce => "wce".into(),
        Objective::Focal => "focal".into(),
        Objective::Gdro => format!("gdro_alpha_{}", alpha.unwrap_or(0.0)),
    }
}

/// WCE, focal and GDRO at every α of `config.alphas`, each over `seeds`.
pub fn compare_objectives(config: &RunConfig, seeds: &[u64]) -> Result<Comparison> {
    let data = load_data(&config.data)?;
    compare_objectives_on(config, &data, seeds, None)
}

pub fn compare_objectives_on(
    config: &RunConfig,
    data: &LoadedData,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Config("compare: seeds must be non-empty".into()));
    }
    let mut methods: Vec<(Objective, Option<f64>)> = vec![(Objective::Wce, None), (Objective::Focal, None)];
    methods.extend(config.alphas.iter().map(|&a| (Objective::Gdro, Some(a))));
    let mut cells = Vec::new();
    for &(obj, alpha) in &methods {
        let mut cfg = config.with_objective(obj, alpha);
        if obj == Objective::Focal && cfg.gamma.is_none() {
            cfg.gamma = Some(2.0);
        }
        for &s in seeds {
            cells.push((method_label(obj, alpha), alpha, cfg.clone(), s));
        }
    }
    let cells = run_cells(data, cells, out);
    let rows = methods
        .iter()
        .map(|&(obj, alpha)| {
            let label = method_label(obj, alpha);
            let mine: Vec<&CellOutcome> = cells.iter().filter(|c| c.label == label).collect();
            let ok: Vec<&MetricsReport> = mine.iter().filter_map(|c| c.result.as_ref().ok()).collect();
            let p: Vec<f64> = ok.iter().map(|m| m.challenge_p).collect();
            let worst: Vec<f64> = ok.iter().map(|m| m.worst_group_macro_f1).collect();
            let minority: Vec<f64> = match config.minority_cell {
                Some(cell) => ok.iter().filter_map(|m| m.cell_f1(cell.group, cell.class)).collect(),
                None => Vec::new(),
            };
            let (mean_p, std_p) = mean_std(&p);
            let (mean_worst_group, std_worst_group) = mean_std(&worst);
            let (mean_minority_cell, std_minority_cell) = mean_std(&minority);
            ComparisonRow {
                method: label,
                seeds: mine.len(),
                failed: mine.len() - ok.len(),
                mean_p,
                std_p,
                mean_worst_group,
                std_worst_group,
                mean_minority_cell,
                std_minority_cell,
            }
        })
        .collect();
    Ok(Comparison { cells, rows })
}
