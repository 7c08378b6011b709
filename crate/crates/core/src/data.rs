//! Synthetic grouped volumes, JSONL persistence and seeded batching.
//!
//! Every slice of a volume is a `D_in` vector
//!
//! ```text
//! x_s = separation · mean(y) · depth(s) + offset(g) + σ · ε
//! ```
//!
//! where the class means are orthonormal, `depth` is a bell over the slice
//! axis (edge slices carry almost no class signal) and `offset(g)` is a
//! per-group unit vector scaled by `site_shift_scale`. A pathological group
//! gets its own orthonormal set of class means, orthogonal to everybody
//! else's, so nothing learned on the other groups transfers to it.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VolumeBatch;
use crate::robust::{group_index_task2, JointIndexing};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Groups are acquisition sites.
    Task1Sites,
    /// Groups are gender × class cells.
    Task2GenderClass,
}

impl Regime {
    /// Name of the per-sample attribute that is not the class.
    pub fn attribute(self) -> &'static str {
        match self {
            Regime::Task1Sites => "site",
            Regime::Task2GenderClass => "gender",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Sample counts for one (site or gender, class) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCount {
    /// Site id (task 1) or gender id (task 2).
    pub attr: usize,
    pub class: usize,
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub regime: Regime,
    /// Number of sites (task 1) or genders (task 2).
    pub attr_values: usize,
    pub classes: usize,
    pub counts: Vec<CellCount>,
    pub slices: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub site_shift_scale: f64,
    #[serde(default)]
    pub pathological_group: Option<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub indexing: JointIndexing,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl GenConfig {
    pub fn num_groups(&self) -> usize {
        match self.regime {
            Regime::Task1Sites => self.attr_values,
            Regime::Task2GenderClass => 2 * self.classes,
        }
    }

    pub fn group_of(&self, attr: usize, class: usize) -> Result<usize> {
        match self.regime {
            Regime::Task1Sites => Ok(attr),
            Regime::Task2GenderClass => group_index_task2(attr, class, self.indexing),
        }
    }

    pub fn count(&self, attr: usize, class: usize, split: Split) -> usize {
        self.counts
            .iter()
            .find(|c| c.attr == attr && c.class == class)
            .map_or(0, |c| match split {
                Split::Train => c.train,
                Split::Val => c.val,
            })
    }

    pub fn total(&self, split: Split) -> usize {
        self.counts
            .iter()
            .map(|c| match split {
                Split::Train => c.train,
                Split::Val => c.val,
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("gen.classes must be at least 2, got {}", self.classes));
        }
        if self.attr_values == 0 || self.slices == 0 || self.input_dim == 0 {
            return bad("gen: attr_values, slices and input_dim must be positive".into());
        }
        if self.regime == Regime::Task2GenderClass && (self.attr_values != 2 || self.classes != 4) {
            return bad("gen: the gender × class regime needs attr_values = 2 and classes = 4".into());
        }
        let needed = if self.pathological_group.is_some() { 2 * self.classes } else { self.classes };
        if self.input_dim < needed {
            return bad(format!(
                "gen.input_dim ({}) must be at least {needed} to hold orthogonal class means",
                self.input_dim
            ));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("site_shift_scale", self.site_shift_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("gen.{name} must be a non-negative number, got {v}"));
            }
        }
        if let Some(p) = self.pathological_group {
            if p >= self.num_groups() {
                return bad(format!("gen.pathological_group {p} out of range for {} groups", self.num_groups()));
            }
        }
        let mut seen = vec![false; self.attr_values * self.classes];
        for c in &self.counts {
            if c.attr >= self.attr_values || c.class >= self.classes {
                return bad(format!("gen.counts: cell ({}, {}) outside the grid", c.attr, c.class));
            }
            let slot = &mut seen[c.attr * self.classes + c.class];
            if *slot {
                return bad(format!("gen.counts: cell ({}, {}) listed twice", c.attr, c.class));
            }
            *slot = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!(
                "gen.counts: cell ({}, {}) missing",
                i / self.classes,
                i % self.classes
            ));
        }
        Ok(())
    }

    /// Multiplies every train count by `train_factor` and every val count
    /// by `val_factor`, rounding to the nearest integer.
    pub fn scaled(&self, train_factor: f64, val_factor: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.counts {
            c.train = (c.train as f64 * train_factor).round() as usize;
            c.val = (c.val as f64 * val_factor).round() as usize;
        }
        out
    }

    /// Four acquisition sites, binary COVID (class 0) vs non-COVID
    /// (class 1), with the per-site train/val grid of the multi-site
    /// challenge data. Site 2 has no COVID validation volumes and is the
    /// pathological site.
    pub fn task1_sites() -> Self {
        let grid = [
            (0, 0, 175, 43),
            (0, 1, 164, 45),
            (1, 0, 175, 43),
            (1, 1, 165, 45),
            (2, 0, 39, 0),
            (2, 1, 165, 45),
            (3, 0, 175, 42),
            (3, 1, 165, 45),
        ];
        Self {
            regime: Regime::Task1Sites,
            attr_values: 4,
            classes: 2,
            counts: cells(&grid),
            slices: 16,
            input_dim: 16,
            class_separation: 1.0,
            site_shift_scale: 1.0,
            pathological_group: Some(2),
            noise_sigma: 1.0,
            seed: 0,
            indexing: JointIndexing::Bijective,
            notes: Vec::new(),
        }
    }

    /// Gender (0 male, 1 female) × four classes (adenocarcinoma,
    /// squamous, COVID-19, normal); 734 train / 155 val volumes with only
    /// five female-squamous training volumes.
    pub fn task2_gender_class() -> Self {
        let grid = [
            (0, 0, 140, 27),
            (0, 1, 95, 20),
            (0, 2, 130, 25),
            (0, 3, 110, 22),
            (1, 0, 125, 25),
            (1, 1, 5, 3),
            (1, 2, 70, 17),
            (1, 3, 59, 16),
        ];
        Self {
            regime: Regime::Task2GenderClass,
            attr_values: 2,
            classes: 4,
            counts: cells(&grid),
            slices: 16,
            input_dim: 16,
            class_separation: 0.5,
            site_shift_scale: 3.0,
            pathological_group: None,
            noise_sigma: 3.3,
            seed: 0,
            indexing: JointIndexing::Bijective,
            notes: vec![
                "female squamous (5 train) and female adenocarcinoma (125 train) are fixed; \
                 the other cells are assumed values chosen to total 734 train / 155 val"
                    .into(),
            ],
        }
    }

    /// Four sites, two classes, equal counts everywhere and no site shift.
    pub fn balanced() -> Self {
        let grid: Vec<(usize, usize, usize, usize)> =
            (0..4).flat_map(|s| (0..2).map(move |c| (s, c, 60, 40))).collect();
        Self {
            regime: Regime::Task1Sites,
            attr_values: 4,
            classes: 2,
            counts: cells(&grid),
            slices: 16,
            input_dim: 16,
            class_separation: 1.0,
            site_shift_scale: 0.0,
            pathological_group: None,
            noise_sigma: 1.0,
            seed: 0,
            indexing: JointIndexing::Bijective,
            notes: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "task1_sites" => Some(Self::task1_sites()),
            "task2_gender_class" => Some(Self::task2_gender_class()),
            "balanced" => Some(Self::balanced()),
            _ => None,
        }
    }
}

fn cells(grid: &[(usize, usize, usize, usize)]) -> Vec<CellCount> {
    grid.iter()
        .map(|&(attr, class, train, val)| CellCount { attr, class, train, val })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSample {
    /// `[S, D_in]`
    pub features: Tensor,
    pub label: usize,
    pub group: usize,
    pub attrs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupedDataset {
    pub samples: Vec<GroupedSample>,
    pub split: Option<Split>,
    pub provenance: Option<GenConfig>,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts over `num_classes` classes.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut out = vec![0; num_classes];
        for s in &self.samples {
            if s.label < num_classes {
                out[s.label] += 1;
            }
        }
        out
    }

    pub fn slice_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.features.shape()[0], s.features.shape()[1]))
    }

    /// Stacks the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<VolumeBatch> {
        let (s, d) = self
            .slice_shape()
            .ok_or_else(|| Error::InvalidArgument("batch: empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * s * d);
        let mut labels = Vec::with_capacity(indices.len());
        let mut groups = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = &self.samples[i];
            if sample.features.shape() != [s, d] {
                return Err(Error::Shape(format!(
                    "batch: sample {i} has shape {:?}, expected [{s}, {d}]",
                    sample.features.shape()
                )));
            }
            data.extend_from_slice(sample.features.data());
            labels.push(sample.label);
            groups.push(sample.group);
        }
        VolumeBatch::new(Tensor::new(vec![indices.len(), s, d], data)?, labels, groups)
    }

    /// Consecutive batches in dataset order.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Vec<VolumeBatch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

fn orthonormal_set<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Minimum pairwise distance enforced between unit site directions.
const MIN_SITE_DISTANCE: f64 = 1.0;

fn site_directions<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.into_iter().map(|x| x / norm).collect();
        let far = dirs.iter().all(|d| {
            let dist2: f64 = d.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            dist2.sqrt() >= MIN_SITE_DISTANCE
        });
        if far {
            dirs.push(v);
        }
    }
    dirs
}

/// Bell weighting over slice positions, peak 1 at the middle slice.
pub fn depth_profile(slices: usize) -> Vec<f64> {
    let centre = (slices as f64 - 1.0) / 2.0;
    let width = (slices as f64 / 6.0).max(0.5);
    (0..slices)
        .map(|s| {
            let z = (s as f64 - centre) / width;
            (-0.5 * z * z).exp()
        })
        .collect()
}

/// Class means, per-group offsets and (when configured) the pathological
/// group's class means, all drawn from the config seed.
#[derive(Debug, Clone)]
pub struct GenStructure {
    pub class_means: Vec<Vec<f64>>,
    pub pathological_means: Option<Vec<Vec<f64>>>,
    /// One offset per training group.
    pub group_offsets: Vec<Vec<f64>>,
    pub depth: Vec<f64>,
}

pub fn structure(config: &GenConfig) -> GenStructure {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let dim = config.input_dim;
    let wanted = if config.pathological_group.is_some() { 2 * config.classes } else { config.classes };
    let mut basis = orthonormal_set(&mut rng, wanted, dim);
    let pathological_means = config
        .pathological_group
        .map(|_| basis.split_off(config.classes));
    let group_offsets = site_directions(&mut rng, config.num_groups(), dim)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * config.site_shift_scale).collect())
        .collect();
    GenStructure {
        class_means: basis,
        pathological_means,
        group_offsets,
        depth: depth_profile(config.slices),
    }
}

fn sample_stream(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => 0u64,
        Split::Val => 1u64 << 40,
    };
    rng.set_stream(tag | index as u64);
    rng
}

fn make_sample(
    config: &GenConfig,
    st: &GenStructure,
    split: Split,
    index: usize,
    attr: usize,
    class: usize,
) -> Result<GroupedSample> {
    let group = config.group_of(attr, class)?;
    let mut rng = sample_stream(config.seed, split, index);
    let means = match (&st.pathological_means, config.pathological_group) {
        (Some(p), Some(pg)) if pg == group => p,
        _ => &st.class_means,
    };
    let mean = &means[class];
    let offset = &st.group_offsets[group];
    let (s, d) = (config.slices, config.input_dim);
    let mut data = Vec::with_capacity(s * d);
    for depth in &st.depth {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(config.class_separation * mean[j] * depth + offset[j] + config.noise_sigma * noise);
        }
    }
    let mut attrs = BTreeMap::new();
    attrs.insert(config.regime.attribute().to_string(), attr);
    attrs.insert("class".to_string(), class);
    Ok(GroupedSample {
        features: Tensor::new(vec![s, d], data)?,
        label: class,
        group,
        attrs,
    })
}

/// Builds the train and val splits cell by cell in grid order.
pub fn generate(config: &GenConfig) -> Result<(GroupedDataset, GroupedDataset)> {
    config.validate()?;
    let st = structure(config);
    let mut out = Vec::with_capacity(2);
    for split in [Split::Train, Split::Val] {
        let mut samples = Vec::with_capacity(config.total(split));
        for attr in 0..config.attr_values {
            for class in 0..config.classes {
                for _ in 0..config.count(attr, class, split) {
                    let index = samples.len();
                    samples.push(make_sample(config, &st, split, index, attr, class)?);
                }
            }
        }
        out.push(GroupedDataset {
            samples,
            split: Some(split),
            provenance: Some(config.clone()),
        });
    }
    let val = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, val))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    features: Vec<Vec<f64>>,
    label: usize,
    group: usize,
    attrs: BTreeMap<String, usize>,
}

pub fn write_jsonl<W: Write>(dataset: &GroupedDataset, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for s in &dataset.samples {
        let d = s.features.shape()[1];
        let line = SampleLine {
            features: s.features.data().chunks(d).map(<[f64]>::to_vec).collect(),
            label: s.label,
            group: s.group,
            attrs: s.attrs.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<GroupedDataset> {
    let mut samples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let rows = parsed.features.len();
        let cols = parsed.features.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || parsed.features.iter().any(|r| r.len() != cols) {
            return Err(Error::Parse {
                line: line_no,
                message: "features must be a non-empty rectangular matrix".into(),
            });
        }
        let features = Tensor::new(vec![rows, cols], parsed.features.concat()).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(GroupedSample {
            features,
            label: parsed.label,
            group: parsed.group,
            attrs: parsed.attrs,
        });
    }
    Ok(GroupedDataset {
        samples,
        split: None,
        provenance: None,
    })
}

pub fn save(dataset: &GroupedDataset, path: &Path) -> Result<()> {
    write_jsonl(dataset, std::fs::File::create(path)?)
}

pub fn load(path: &Path) -> Result<GroupedDataset> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

/// Sample order for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled batches covering every sample exactly once; the last batch
/// may be short.
pub fn batch_iter(dataset: &GroupedDataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<VolumeBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_iter: batch_size must be at least 1".into()));
    }
    epoch_order(dataset.len(), seed, epoch)
        .chunks(batch_size)
        .map(|c| dataset.batch(c))
        .collect()
}
