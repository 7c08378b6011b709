//! Confusion matrices, per-class and macro F1, per-group reports and the
//! challenge scores built on them.

use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{predict_logits, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return invalid(format!(
                "confusion: {} labels vs {} predictions",
                truth.len(),
                predicted.len()
            ));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || predicted >= c {
            return invalid(format!("confusion: class pair ({truth}, {predicted}) outside {c} classes"));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Elementwise sum of two matrices of the same size.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if self.classes() != other.classes() {
            return invalid("confusion: cannot merge matrices of different sizes");
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self { counts })
    }
}

/// `F1_c = 2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    let c = cm.classes();
    (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let fn_: u64 = cm.counts[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|r| cm.counts[r][k]).sum::<u64>() - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect()
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = f1_per_class(cm);
    if f1.is_empty() {
        return 0.0;
    }
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// Mean of the four per-centre macro F1 scores.
pub fn challenge_p_task1(per_centre_macro: &[f64]) -> Result<f64> {
    if per_centre_macro.len() != 4 {
        return invalid(format!(
            "challenge_p_task1: expected 4 centre scores, got {}",
            per_centre_macro.len()
        ));
    }
    Ok(per_centre_macro.iter().sum::<f64>() / 4.0)
}

/// Mean of the two per-gender macro F1 scores.
pub fn challenge_p_task2(male_macro: f64, female_macro: f64) -> f64 {
    (male_macro + female_macro) / 2.0
}

/// Argmax with ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub support: u64,
    pub confusion: ConfusionMatrix,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sample attribute the groups are taken from (`site` or `gender`).
    pub grouping: String,
    pub num_classes: usize,
    pub groups: Vec<GroupMetrics>,
    /// Mean of per-group macro F1.
    pub challenge_p: f64,
    pub worst_group_macro_f1: f64,
    pub best_group_macro_f1: f64,
    /// Largest pairwise difference in per-group macro F1.
    pub max_gap: f64,
    pub overall_macro_f1: f64,
    pub accuracy: f64,
}

impl MetricsReport {
    pub fn from_predictions(
        grouping: &str,
        num_classes: usize,
        num_groups: usize,
        truth: &[usize],
        predicted: &[usize],
        groups: &[usize],
    ) -> Result<Self> {
        if truth.len() != predicted.len() || truth.len() != groups.len() {
            return invalid("metrics: labels, predictions and groups differ in length");
        }
        if num_groups == 0 {
            return invalid("metrics: need at least one group");
        }
        let mut cms = vec![ConfusionMatrix::new(num_classes); num_groups];
        let mut overall = ConfusionMatrix::new(num_classes);
        for ((&t, &p), &g) in truth.iter().zip(predicted).zip(groups) {
            if g >= num_groups {
                return invalid(format!("metrics: group {g} out of range for {num_groups} groups"));
            }
            cms[g].record(t, p)?;
            overall.record(t, p)?;
        }
        let groups: Vec<GroupMetrics> = cms
            .into_iter()
            .enumerate()
            .map(|(g, cm)| GroupMetrics {
                group: g,
                support: cm.total(),
                f1: f1_per_class(&cm),
                macro_f1: macro_f1(&cm),
                confusion: cm,
            })
            .collect();
        let macros: Vec<f64> = groups.iter().map(|g| g.macro_f1).collect();
        let worst = macros.iter().copied().fold(f64::INFINITY, f64::min);
        let best = macros.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let correct: u64 = (0..num_classes).map(|k| overall.counts[k][k]).sum();
        let total = overall.total();
        Ok(Self {
            grouping: grouping.to_string(),
            num_classes,
            challenge_p: macros.iter().sum::<f64>() / macros.len() as f64,
            worst_group_macro_f1: worst,
            best_group_macro_f1: best,
            max_gap: best - worst,
            overall_macro_f1: macro_f1(&overall),
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            groups,
        })
    }

    /// F1 of one class within one evaluation group.
    pub fn cell_f1(&self, group: usize, class: usize) -> Option<f64> {
        self.groups.get(group).and_then(|g| g.f1.get(class).copied())
    }

    pub fn group_macro_f1(&self, group: usize) -> Option<f64> {
        self.groups.get(group).map(|g| g.macro_f1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV: one `f1` row per group × class, one `macro_f1` row
    /// per group, then summary rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "group", "class", "value"])?;
        for g in &self.groups {
            for (k, f) in g.f1.iter().enumerate() {
                w.write_record(["f1", &g.group.to_string(), &k.to_string(), &f.to_string()])?;
            }
            w.write_record(["macro_f1", &g.group.to_string(), "", &g.macro_f1.to_string()])?;
        }
        for (name, v) in [
            ("challenge_p", self.challenge_p),
            ("worst_group_macro_f1", self.worst_group_macro_f1),
            ("max_gap", self.max_gap),
            ("overall_macro_f1", self.overall_macro_f1),
            ("accuracy", self.accuracy),
        ] {
            w.write_record([name, "", "", &v.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Eval-mode logits for every sample, `[n, classes]`, computed in chunks.
pub fn dataset_logits(params: &ParamStore, config: &ModelConfig, dataset: &GroupedDataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for batch in dataset.ordered_batches(64)? {
        let logits: Tensor = predict_logits(params, config, &batch.features)?;
        out.extend(logits.data().chunks(config.num_classes).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Number of evaluation groups for an attribute: the generator's grid
/// size when known, otherwise one past the largest value seen.
pub fn attribute_groups(dataset: &GroupedDataset, attribute: &str) -> Result<usize> {
    if let Some(cfg) = &dataset.provenance {
        if cfg.regime.attribute() == attribute {
            return Ok(cfg.attr_values);
        }
    }
    let mut max = None;
    for (i, s) in dataset.samples.iter().enumerate() {
        let v = *s
            .attrs
            .get(attribute)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no `{attribute}` attribute")))?;
        max = Some(max.map_or(v, |m: usize| m.max(v)));
    }
    Ok(max.map_or(1, |m| m + 1))
}

/// Scores `params` on `dataset`, grouping samples by `attribute`.
pub fn evaluate(
    params: &ParamStore,
    config: &ModelConfig,
    dataset: &GroupedDataset,
    attribute: &str,
) -> Result<MetricsReport> {
    let logits = dataset_logits(params, config, dataset)?;
    report_from_logits(config.num_classes, dataset, attribute, &logits)
}

pub fn report_from_logits(
    num_classes: usize,
    dataset: &GroupedDataset,
    attribute: &str,
    logits: &[Vec<f64>],
) -> Result<MetricsReport> {
    if let Some(s) = dataset.samples.iter().find(|s| s.label >= num_classes) {
        return invalid(format!(
            "evaluate: dataset label {} but the model has {num_classes} classes",
            s.label
        ));
    }
    let num_groups = attribute_groups(dataset, attribute)?;
    let truth: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let predicted: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    let groups = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.attrs
                .get(attribute)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no `{attribute}` attribute")))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_predictions(attribute, num_classes, num_groups, &truth, &predicted, &groups)
}
