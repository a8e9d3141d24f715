//! Datasets, label-shift protocols and mini-batch samplers.
//!
//! The shift protocol draws class proportions from a discretized Pareto
//! density, interpolates them with the uniform distribution according to a
//! shift degree, converts them to integer counts with largest-remainder
//! rounding, and subsamples a balanced pool without replacement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::objectives::LabelDistribution;

/// Features plus integer class labels for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, num_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn label_distribution(&self) -> Result<LabelDistribution> {
        LabelDistribution::from_counts(&self.class_counts())
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: provenance.into(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor2, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

pub fn rng_for(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftDirection {
    /// Reversely-unbalanced source: the largest proportion goes to the last class.
    #[serde(rename = "rs")]
    SourceReversed,
    /// Unbalanced target: the r-th largest proportion goes to class r-1.
    #[serde(rename = "ut")]
    TargetRanked,
}

impl std::str::FromStr for ShiftDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rs" | "source-reversed" => Ok(Self::SourceReversed),
            "ut" | "target-ranked" => Ok(Self::TargetRanked),
            other => Err(Error::Config(format!("unknown shift direction `{other}` (expected rs or ut)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Pareto shape.
    pub alpha: f64,
    pub direction: ShiftDirection,
    /// Shift degree in percent: 0 is balanced, 100 the full long-tailed split.
    pub degree: f64,
    pub min_per_class: usize,
    pub budget: usize,
    /// The Pareto density is evaluated at `1 + width·(r-1)/(c-1)`.
    #[serde(default = "default_interval_width")]
    pub interval_width: f64,
}

fn default_interval_width() -> f64 {
    1.0
}

impl ShiftSpec {
    pub fn new(alpha: f64, direction: ShiftDirection, degree: f64, budget: usize) -> Self {
        Self {
            alpha,
            direction,
            degree,
            min_per_class: 2,
            budget,
            interval_width: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(0.0..=100.0).contains(&self.degree) || !(self.interval_width > 0.0) {
            return Err(Error::Config(format!("invalid shift spec {self:?}")));
        }
        Ok(())
    }

    /// Class-indexed proportions: `(1 - d)·uniform + d·ranked Pareto`.
    pub fn proportions(&self, num_classes: usize) -> Result<LabelDistribution> {
        self.validate()?;
        let ranked = pareto_proportions_with_width(num_classes, self.alpha, self.interval_width)?;
        let ranked = ranked.proportions();
        let d = self.degree / 100.0;
        let uniform = 1.0 / num_classes as f64;
        let by_class: Vec<f64> = (0..num_classes)
            .map(|class| {
                let rank = match self.direction {
                    ShiftDirection::TargetRanked => class,
                    ShiftDirection::SourceReversed => num_classes - 1 - class,
                };
                (1.0 - d) * uniform + d * ranked[rank]
            })
            .collect();
        LabelDistribution::from_weights(&by_class)
    }

    /// Integer per-class counts summing exactly to the budget.
    pub fn counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        let props = self.proportions(num_classes)?;
        let mut counts = largest_remainder_counts(&props, self.budget);
        if self.min_per_class * num_classes > self.budget {
            return Err(Error::Config(format!(
                "budget {} cannot hold {} samples for each of {num_classes} classes",
                self.budget, self.min_per_class
            )));
        }
        // Raise starved classes to the floor, taking from the largest class.
        while let Some(low) = (0..num_classes).find(|&i| counts[i] < self.min_per_class) {
            let high = (0..num_classes).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("nonempty");
            counts[high] -= 1;
            counts[low] += 1;
        }
        Ok(counts)
    }
}

/// Pareto class proportions, ranked largest first, evaluated on `[1, 2]`.
pub fn pareto_proportions(num_classes: usize, alpha: f64) -> Result<LabelDistribution> {
    pareto_proportions_with_width(num_classes, alpha, 1.0)
}

/// Rank `r` (1-based) gets weight `x_r^-(α+1)` with
/// `x_r = 1 + width·(r-1)/(c-1)`, normalized.
pub fn pareto_proportions_with_width(num_classes: usize, alpha: f64, width: f64) -> Result<LabelDistribution> {
    if num_classes < 2 || !(alpha > 0.0) || !(width > 0.0) {
        return Err(Error::Config(format!(
            "pareto proportions need c >= 2, alpha > 0 and width > 0 (got {num_classes}, {alpha}, {width})"
        )));
    }
    let weights: Vec<f64> = (0..num_classes)
        .map(|r| {
            let x = 1.0 + width * r as f64 / (num_classes - 1) as f64;
            x.powf(-(alpha + 1.0))
        })
        .collect();
    LabelDistribution::from_weights(&weights)
}

/// Floors `budget · p_i`, then hands the leftover units to the largest
/// fractional parts (lower class index first on ties).
pub fn largest_remainder_counts(distribution: &LabelDistribution, budget: usize) -> Vec<usize> {
    let exact: Vec<f64> = distribution.proportions().iter().map(|p| p * budget as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Upper bound on the JS distance between requested proportions and the
/// realized proportions of largest-remainder counts. Each class is off by
/// less than `1/B`, so `L1 < c/B`, and `JS ≤ (ln 2 / 2)·L1`.
pub fn rounding_js_bound(num_classes: usize, budget: usize) -> f64 {
    (std::f64::consts::LN_2 / 2.0 * num_classes as f64 / budget as f64).sqrt()
}

/// Subsamples `dataset` to the class counts prescribed by `spec`, without
/// replacement. The output is shuffled.
pub fn build_shift(dataset: &LabeledDataset, spec: &ShiftSpec, seed: u64) -> Result<LabeledDataset> {
    let counts = spec.counts(dataset.num_classes)?;
    let pools = dataset.indices_by_class();
    let mut rng = rng_for(seed, "build_shift", 0);
    let mut chosen = Vec::with_capacity(spec.budget);
    for (class, (pool, &needed)) in pools.iter().zip(&counts).enumerate() {
        if pool.len() < needed {
            return Err(Error::InsufficientSamples {
                class,
                needed,
                available: pool.len(),
                shortfall: needed - pool.len(),
            });
        }
        let mut pool = pool.clone();
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..needed]);
    }
    chosen.shuffle(&mut rng);
    let direction = match spec.direction {
        ShiftDirection::SourceReversed => "rs",
        ShiftDirection::TargetRanked => "ut",
    };
    Ok(dataset.subset(
        &chosen,
        format!(
            "{} | shift {direction} alpha={} degree={} budget={} seed={seed}",
            dataset.provenance, spec.alpha, spec.degree, spec.budget
        ),
    ))
}

/// Class-conditional Gaussian blobs observed in two domains. The target
/// domain applies a rotation (in the first two feature dimensions, about
/// the origin) followed by a translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinDomainConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Class means sit evenly on a circle of this radius in the first two dimensions.
    pub radius: f64,
    pub noise_std: f64,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    /// Pool size per class and domain (balanced).
    pub per_class: usize,
}

impl Default for TwinDomainConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 2,
            radius: 3.0,
            noise_std: 1.0,
            rotation_deg: 30.0,
            translation: vec![0.0, 0.0],
            per_class: 1000,
        }
    }
}

impl TwinDomainConfig {
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / self.num_classes as f64;
                let mut m = vec![0.0; self.dim];
                m[0] = self.radius * angle.cos();
                m[1] = self.radius * angle.sin();
                m
            })
            .collect()
    }

    fn validate(&self, means: &[Vec<f64>]) -> Result<()> {
        if self.dim < 2 || self.num_classes < 2 || !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("invalid twin-domain config {self:?}")));
        }
        if means.len() != self.num_classes || means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Config(format!(
                "need {} class means of dimension {}",
                self.num_classes, self.dim
            )));
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return Err(Error::Config(format!(
                "translation has {} entries, expected {}",
                self.translation.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

fn sample_blobs(
    means: &[Vec<f64>],
    per_class: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
    transform: impl Fn(&mut [f64]),
) -> (Tensor2, Vec<usize>) {
    let dim = means.first().map_or(0, Vec::len);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let mut x: Vec<f64> = mean
                .iter()
                .map(|m| m + if noise > 0.0 { normal.sample(rng) } else { 0.0 })
                .collect();
            transform(&mut x);
            data.extend(x);
            labels.push(class);
        }
    }
    (Tensor2::from_vec(labels.len(), dim, data).expect("sized"), labels)
}

/// Balanced source and target pools sharing class means.
pub fn generate_twin_domains(
    config: &TwinDomainConfig,
    means: &[Vec<f64>],
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate(means)?;
    let (sin, cos) = config.rotation_deg.to_radians().sin_cos();
    let translation = config.translation.clone();
    let mut src_rng = rng_for(seed, "twin-source", 0);
    let mut tgt_rng = rng_for(seed, "twin-target", 0);
    let (xs, ys) = sample_blobs(means, config.per_class, config.noise_std, &mut src_rng, |_| {});
    let (xt, yt) = sample_blobs(means, config.per_class, config.noise_std, &mut tgt_rng, |x| {
        let (a, b) = (x[0], x[1]);
        x[0] = cos * a - sin * b;
        x[1] = sin * a + cos * b;
        for (v, t) in x.iter_mut().zip(&translation) {
            *v += t;
        }
    });
    let tag = format!(
        "twin classes={} dim={} radius={} noise={} rotation={} seed={seed}",
        config.num_classes, config.dim, config.radius, config.noise_std, config.rotation_deg
    );
    Ok((
        LabeledDataset::new(xs, ys, config.num_classes, format!("{tag} domain=source"))?,
        LabeledDataset::new(xt, yt, config.num_classes, format!("{tag} domain=target"))?,
    ))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

/// Parses an IDX image/label pair from memory; returns the dataset and the
/// image shape `(rows, cols)`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<(LabeledDataset, (usize, usize))> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n_images = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!("{n_images} images but {n_labels} labels")));
    }
    let pixels = n_images * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| Error::Truncated(format!("images: expected {pixels} pixel bytes, found {}", images.len().saturating_sub(16))))?;
    let label_bytes = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| Error::Truncated(format!("labels: expected {n_labels} bytes, found {}", labels.len().saturating_sub(8))))?;
    let features = Tensor2::from_vec(n_images, rows * cols, body.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let ys: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let num_classes = ys.iter().max().map_or(1, |m| m + 1).max(10);
    Ok((LabeledDataset::new(features, ys, num_classes, "idx")?, (rows, cols)))
}

/// Loads an MNIST-format image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let (mut ds, _) = parse_idx(&images, &labels)?;
    ds.provenance = format!("idx:{}:{}", images_path.display(), labels_path.display());
    Ok(ds)
}

/// Encodes a dataset as IDX bytes; features are mapped back to bytes by `round(255·x)`.
pub fn encode_idx(dataset: &LabeledDataset, image_shape: (usize, usize)) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = image_shape;
    if rows * cols != dataset.feature_dim() {
        return Err(Error::Dimension {
            op: "encode_idx",
            left: image_shape,
            right: dataset.features.shape(),
        });
    }
    let n = u32::try_from(dataset.len()).map_err(|_| Error::Format("too many samples for IDX".into()))?;
    let mut images = Vec::with_capacity(16 + dataset.features.data().len());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend(n.to_be_bytes());
    images.extend((rows as u32).to_be_bytes());
    images.extend((cols as u32).to_be_bytes());
    images.extend(dataset.features.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend(n.to_be_bytes());
    for &l in &dataset.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))?);
    }
    Ok((images, labels))
}

pub fn write_idx(dataset: &LabeledDataset, image_shape: (usize, usize), images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(dataset, image_shape)?;
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

/// Reads a CSV with a header row, float feature columns and a final integer
/// label column. The class count is `max label + 1` unless given.
pub fn read_csv<R: std::io::Read>(reader: R, num_classes: Option<usize>, provenance: &str) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Format(format!("row {line}: need at least one feature and a label")));
        }
        let dim = record.len() - 1;
        if *width.get_or_insert(dim) != dim {
            return Err(Error::Consistency(format!("row {line} has {dim} features, expected {}", width.unwrap_or(0))));
        }
        for field in record.iter().take(dim) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {line}: bad feature `{field}`: {e}")))?,
            );
        }
        let label = &record[dim];
        labels.push(
            label
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("row {line}: bad label `{label}`: {e}")))?,
        );
    }
    let dim = width.unwrap_or(0);
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(Tensor2::from_vec(labels.len(), dim, data)?, labels, classes, provenance)
}

pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, num_classes, &format!("csv:{}", path.display()))
}

pub fn write_csv<W: std::io::Write>(dataset: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..dataset.feature_dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in dataset.features.iter_rows().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Ordered index batches covering one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Class-balanced batches: each batch takes `⌊B/c⌋` samples per class, and
/// the `B mod c` remaining slots go round-robin through a per-epoch shuffled
/// class order. Per-class queues are reshuffled and recycled when exhausted.
/// The epoch has `⌈N/B⌉` batches.
pub fn balanced_batches(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Sampler("batch size must be >= 1".into()));
    }
    let mut pools = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools
            .get_mut(l)
            .ok_or(Error::LabelOutOfRange {
                row: i,
                label: l,
                classes: num_classes,
            })?
            .push(i);
    }
    if let Some(empty) = pools.iter().position(Vec::is_empty) {
        return Err(Error::Sampler(format!("class {empty} has no samples")));
    }
    let mut rng = rng_for(seed, "balanced_batches", 0);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    let mut queues: Vec<Vec<usize>> = pools
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.shuffle(&mut rng);
            q
        })
        .collect();
    let mut cursors = vec![0usize; num_classes];
    let mut draw = |class: usize, rng: &mut ChaCha8Rng| {
        if cursors[class] == queues[class].len() {
            queues[class].shuffle(rng);
            cursors[class] = 0;
        }
        let idx = queues[class][cursors[class]];
        cursors[class] += 1;
        idx
    };

    let per_class = batch_size / num_classes;
    let remainder = batch_size % num_classes;
    let n_batches = labels.len().div_ceil(batch_size);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for class in 0..num_classes {
            for _ in 0..per_class {
                batch.push(draw(class, &mut rng));
            }
        }
        for j in 0..remainder {
            let class = order[(b * remainder + j) % num_classes];
            batch.push(draw(class, &mut rng));
        }
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(BatchPlan { batch_size, batches })
}

/// Plain shuffled batching; the last batch may be short.
pub fn natural_batches(num_samples: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Sampler("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..num_samples).collect();
    idx.shuffle(&mut rng_for(seed, "natural_batches", 0));
    Ok(BatchPlan {
        batch_size,
        batches: idx.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    })
}

/// Seeded per-class split. Each class with at least two samples puts
/// `round(fraction · n)` of them (at least one, at most `n - 1`) in the holdout.
pub fn stratified_split(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let mut rng = rng_for(seed, "stratified_split", 0);
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for mut pool in dataset.indices_by_class() {
        pool.shuffle(&mut rng);
        let n = pool.len();
        let k = if n >= 2 && fraction > 0.0 {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        hold.extend_from_slice(&pool[..k]);
        train.extend_from_slice(&pool[k..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    Ok((
        dataset.subset(&train, format!("{} | train split", dataset.provenance)),
        dataset.subset(&hold, format!("{} | holdout split", dataset.provenance)),
    ))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MANIFEST_FORMAT: &str = "coal-dataset-manifest";

/// Sidecar JSON describing a generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub provenance: String,
    pub num_samples: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub per_class_counts: Vec<usize>,
    pub shift: Option<ShiftSpec>,
    pub seed: u64,
    /// File name (relative to the manifest) of the CSV holding the samples.
    pub data_file: Option<String>,
    /// SHA-256 of every input file the split was derived from, plus the data file.
    pub source_hashes: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn describe(dataset: &LabeledDataset, shift: Option<ShiftSpec>, seed: u64) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            provenance: dataset.provenance.clone(),
            num_samples: dataset.len(),
            num_classes: dataset.num_classes,
            feature_dim: dataset.feature_dim(),
            per_class_counts: dataset.class_counts(),
            shift,
            seed,
            data_file: None,
            source_hashes: BTreeMap::new(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.manifest.json` into `dir`.
    pub fn write_with_data(mut self, dataset: &LabeledDataset, dir: &Path, stem: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv_bytes = Vec::new();
        write_csv(dataset, &mut csv_bytes)?;
        let data_name = format!("{stem}.csv");
        std::fs::write(dir.join(&data_name), &csv_bytes)?;
        self.source_hashes.insert(data_name.clone(), sha256_hex(&csv_bytes));
        self.data_file = Some(data_name);
        std::fs::write(dir.join(format!("{stem}.manifest.json")), serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("`{}` is not a dataset manifest", path.display())));
        }
        Ok(manifest)
    }

    /// Loads the CSV referenced by a manifest file, verifying its hash.
    pub fn load_dataset(path: &Path) -> Result<(Self, LabeledDataset)> {
        let manifest = Self::load(path)?;
        let name = manifest
            .data_file
            .clone()
            .ok_or_else(|| Error::Consistency("manifest does not reference a data file".into()))?;
        let data_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&name);
        let bytes = std::fs::read(&data_path)?;
        if let Some(expected) = manifest.source_hashes.get(&name) {
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(Error::Consistency(format!("{name} hash {actual} does not match manifest {expected}")));
            }
        }
        let ds = read_csv(bytes.as_slice(), Some(manifest.num_classes), &manifest.provenance)?;
        Ok((manifest, ds))
    }
}
