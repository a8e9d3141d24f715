//! Training loops and the experiment driver.
//!
//! A run pretrains on labeled source data, then runs adaptation epochs with
//! one of three methods: COAL (pseudo-label assignment, then combined
//! self-training and minimax-entropy steps), source-only, or a marginal
//! feature alignment baseline with a domain discriminator.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{
    balanced_batches, build_shift, derive_seed, generate_twin_domains, load_csv, load_idx, natural_batches, rng_for,
    stratified_split, BatchPlan, DatasetManifest, LabeledDataset, ShiftDirection, ShiftSpec, TwinDomainConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{compare_distributions, per_class_mean_accuracy, ConfusionMatrix, DistributionComparison};
use crate::model::{Architecture, BlockRole, ModelParams, DEFAULT_TEMPERATURE};
use crate::numerics::{sgd_momentum_step, softmax_cross_entropy, ParamSet};
use crate::objectives::{
    adaptive_objective, source_classification_loss, ActiveTerms, LabelDistribution, LabeledBatch, LossBreakdown,
    PseudoBatch, DEFAULT_ALPHA,
};
use crate::selftrain::{assign_pseudo_labels, estimate_target_distribution, select_top_k_per_class, KSchedule, PseudoLabelSet};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Coal,
    SourceOnly,
    MarginalAlign,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Coal => "coal",
            Method::SourceOnly => "source-only",
            Method::MarginalAlign => "marginal-align",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Balanced,
    Natural,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub disable_pseudo_term: bool,
    pub disable_entropy_term: bool,
}

impl Ablations {
    pub fn active_terms(self) -> ActiveTerms {
        ActiveTerms {
            pseudo: !self.disable_pseudo_term,
            entropy: !self.disable_entropy_term,
        }
    }

    pub fn any(self) -> bool {
        self.disable_pseudo_term || self.disable_entropy_term
    }
}

/// Which parameter blocks an optimizer step may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    All,
    ClassifierOnly,
    ExtractorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Adaptation epochs after pretraining.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
    /// Learning rate for the extractor and the domain discriminator.
    pub lr_other: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub k_schedule: KSchedule,
    pub sampler: SamplerKind,
    pub ablations: Ablations,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub temperature: f64,
    /// Gradient reversal coefficient for the marginal alignment baseline.
    pub domain_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Coal,
            epochs: 30,
            pretrain_epochs: 10,
            batch_size: 32,
            lr_classifier: 0.01,
            lr_other: 0.001,
            momentum: 0.9,
            alpha: DEFAULT_ALPHA,
            k_schedule: KSchedule::default(),
            sampler: SamplerKind::Balanced,
            ablations: Ablations::default(),
            seed: 0,
            hidden_dims: vec![32, 16],
            temperature: DEFAULT_TEMPERATURE,
            domain_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ablations.any() && self.method != Method::Coal {
            return bad(format!("ablation flags require method = coal, got {}", self.method.as_str()));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must list at least one positive width".into());
        }
        for (name, v) in [
            ("lr_classifier", self.lr_classifier),
            ("lr_other", self.lr_other),
            ("alpha", self.alpha),
            ("domain_weight", self.domain_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        self.k_schedule.validate()
    }

    /// Human-readable row label: method, ablations and non-default sampler.
    pub fn run_label(&self) -> String {
        let mut label = self.method.as_str().to_string();
        let mut off = Vec::new();
        if self.ablations.disable_pseudo_term {
            off.push("pseudo");
        }
        if self.ablations.disable_entropy_term {
            off.push("entropy");
        }
        if !off.is_empty() {
            label.push_str(&format!(" w/o {}", off.join("+")));
        }
        if self.sampler == SamplerKind::Natural {
            label.push_str(" (natural sampler)");
        }
        label
    }

    fn learning_rates(&self, model: &ModelParams, scope: UpdateScope) -> Vec<f64> {
        model
            .block_roles()
            .into_iter()
            .map(|role| match (role, scope) {
                (BlockRole::Classifier, UpdateScope::ExtractorOnly) => 0.0,
                (BlockRole::Classifier, _) => self.lr_classifier,
                (BlockRole::Extractor, UpdateScope::ClassifierOnly) => 0.0,
                (BlockRole::Discriminator, UpdateScope::ClassifierOnly | UpdateScope::ExtractorOnly) => 0.0,
                _ => self.lr_other,
            })
            .collect()
    }
}

/// Where the two balanced domain pools come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainSource {
    Twin(TwinDomainConfig),
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        target_labels: PathBuf,
    },
    Csv {
        source: PathBuf,
        target: PathBuf,
        num_classes: Option<usize>,
    },
}

impl DomainSource {
    fn kind(&self) -> &'static str {
        match self {
            DomainSource::Twin(_) => "twin",
            DomainSource::Idx { .. } => "idx",
            DomainSource::Csv { .. } => "csv",
        }
    }
}

/// Label-shift setup: the source follows the reversed ranking, the target
/// the ranked one, both at the same degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DomainSource,
    #[serde(default = "one")]
    pub pareto_alpha: f64,
    #[serde(default = "full_degree")]
    pub degree: f64,
    pub source_budget: usize,
    pub target_budget: usize,
    #[serde(default = "two")]
    pub min_per_class: usize,
    #[serde(default = "one")]
    pub interval_width: f64,
    #[serde(default = "holdout")]
    pub holdout_fraction: f64,
    /// Seed for pool generation, subsampling and the holdout split;
    /// defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}
fn two() -> usize {
    2
}
fn full_degree() -> f64 {
    100.0
}
fn holdout() -> f64 {
    0.2
}

impl DataConfig {
    pub fn shift(&self, direction: ShiftDirection, budget: usize) -> ShiftSpec {
        ShiftSpec {
            alpha: self.pareto_alpha,
            direction,
            degree: self.degree,
            min_per_class: self.min_per_class,
            budget,
            interval_width: self.interval_width,
        }
    }
}

/// Everything `train` reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task name used as the column header in result tables.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        // Relative input paths are resolved against the config file.
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.data.source {
            DomainSource::Twin(_) => {}
            DomainSource::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
            } => {
                fix(source_images);
                fix(source_labels);
                fix(target_images);
                fix(target_labels);
            }
            DomainSource::Csv { source, target, .. } => {
                fix(source);
                fix(target);
            }
        }
        if let Some(out) = &mut cfg.out_dir {
            fix(out);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    pub fn task_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.data.source.kind().to_string())
    }

    /// One config per shift degree.
    pub fn sweep(&self, degrees: &[f64]) -> Vec<ExperimentConfig> {
        degrees
            .iter()
            .map(|&d| {
                let mut c = self.clone();
                c.data.degree = d;
                c
            })
            .collect()
    }

    /// Full COAL and the two single-term ablations.
    pub fn ablation_variants(&self) -> Vec<ExperimentConfig> {
        [(false, false), (true, false), (false, true)]
            .into_iter()
            .map(|(pseudo, entropy)| {
                let mut c = self.clone();
                c.train.method = Method::Coal;
                c.train.ablations = Ablations {
                    disable_pseudo_term: pseudo,
                    disable_entropy_term: entropy,
                };
                c
            })
            .collect()
    }
}

/// Shifted datasets for one experiment.
#[derive(Clone, Debug)]
pub struct Domains {
    pub source: LabeledDataset,
    /// Unlabeled during training; labels only score pseudo-labels.
    pub target_train: LabeledDataset,
    pub target_holdout: LabeledDataset,
    pub source_shift: ShiftSpec,
    pub target_shift: ShiftSpec,
    pub seed: u64,
    /// Input files the pools were read from, for manifest hashing.
    pub inputs: Vec<PathBuf>,
}

pub fn prepare_domains(config: &ExperimentConfig) -> Result<Domains> {
    let data = &config.data;
    let seed = config.data_seed();
    let (source_pool, target_pool, inputs) = match &data.source {
        DomainSource::Twin(twin) => {
            let (s, t) = generate_twin_domains(twin, &twin.class_means(), derive_seed(seed, "pools", 0))?;
            (s, t, Vec::new())
        }
        DomainSource::Idx {
            source_images,
            source_labels,
            target_images,
            target_labels,
        } => {
            let s = load_idx(source_images, source_labels)?;
            let mut t = load_idx(target_images, target_labels)?;
            let classes = s.num_classes.max(t.num_classes);
            t.num_classes = classes;
            let s = LabeledDataset { num_classes: classes, ..s };
            let inputs = vec![source_images.clone(), source_labels.clone(), target_images.clone(), target_labels.clone()];
            (s, t, inputs)
        }
        DomainSource::Csv { source, target, num_classes } => {
            let s = load_csv(source, *num_classes)?;
            let t = load_csv(target, Some(num_classes.unwrap_or(s.num_classes)))?;
            (s, t, vec![source.clone(), target.clone()])
        }
    };
    if source_pool.num_classes != target_pool.num_classes || source_pool.feature_dim() != target_pool.feature_dim() {
        return Err(Error::Consistency(format!(
            "source has {} classes x {} features, target {} x {}",
            source_pool.num_classes,
            source_pool.feature_dim(),
            target_pool.num_classes,
            target_pool.feature_dim()
        )));
    }
    let source_shift = data.shift(ShiftDirection::SourceReversed, data.source_budget);
    let target_shift = data.shift(ShiftDirection::TargetRanked, data.target_budget);
    let source = build_shift(&source_pool, &source_shift, derive_seed(seed, "source-shift", 0))?;
    let target = build_shift(&target_pool, &target_shift, derive_seed(seed, "target-shift", 0))?;
    let (target_train, target_holdout) = stratified_split(&target, data.holdout_fraction, derive_seed(seed, "holdout", 0))?;
    Ok(Domains {
        source,
        target_train,
        target_holdout,
        source_shift,
        target_shift,
        seed,
        inputs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub l_sc: f64,
    pub source_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-averaged loss terms.
    pub loss: LossBreakdown,
    pub domain_loss: Option<f64>,
    /// Metrics on the labeled target holdout.
    pub per_class_mean_accuracy: f64,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Class proportions of the pseudo-labels selected for this epoch.
    pub estimated_distribution: Option<Vec<f64>>,
    pub k: Option<f64>,
    pub selected: Option<usize>,
    pub pseudo_label_accuracy: Option<f64>,
    pub discriminator_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_class_mean_accuracy: f64,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// Predicted class proportions on the target training split.
    pub estimated_distribution: Vec<f64>,
    pub true_distribution: Vec<f64>,
    pub distribution_gap: DistributionComparison,
}

/// Everything about a run that is a pure function of (config, data, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub label: String,
    pub method: Method,
    pub task: String,
    pub degree: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub num_classes: usize,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub holdout_counts: Vec<usize>,
    pub config: TrainConfig,
    pub pretrain: Vec<PretrainRecord>,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pretrain_seconds: f64,
    /// Wall time of each adaptation epoch, indexed like `metrics.epochs`.
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub timing: Timing,
}

impl RunReport {
    /// The deterministic part of the report, serialized.
    pub fn metrics_payload(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.metrics)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One optimizer step's losses, streamed to `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub l_sc: f64,
    pub l_target_pseudo: f64,
    pub l_st: f64,
    pub l_h: f64,
    pub domain_loss: Option<f64>,
}

pub fn build_model(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<ModelParams> {
    ModelParams::init(
        Architecture {
            input_dim,
            layer_dims: config.hidden_dims.clone(),
            num_classes,
            temperature: config.temperature,
            discriminator: config.method == Method::MarginalAlign,
        },
        derive_seed(config.seed, "init", 0),
    )
}

/// Applies one momentum-SGD step to the blocks allowed by `scope`.
pub fn apply_update(model: &mut ModelParams, config: &TrainConfig, scope: UpdateScope) -> Result<()> {
    let lrs = config.learning_rates(model, scope);
    let mut blocks = model.blocks_mut();
    sgd_momentum_step(&mut blocks, &lrs, config.momentum)
}

fn source_plan(source: &LabeledDataset, config: &TrainConfig, seed: u64) -> Result<BatchPlan> {
    match config.sampler {
        SamplerKind::Balanced => balanced_batches(&source.labels, source.num_classes, config.batch_size, seed),
        SamplerKind::Natural => natural_batches(source.len(), config.batch_size, seed),
    }
}

fn check_finite(value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { context: context() })
    }
}

/// Trains on labeled source batches only. Zero epochs leave the model untouched.
pub fn pretrain(
    model: &mut ModelParams,
    source: &LabeledDataset,
    config: &TrainConfig,
    log: &mut Vec<StepRecord>,
) -> Result<Vec<PretrainRecord>> {
    let mut records = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let plan = source_plan(source, config, derive_seed(config.seed, "pretrain-source", epoch as u64))?;
        let mut total = 0.0;
        for (step, idx) in plan.batches.iter().enumerate() {
            let (x, y) = source.batch(idx);
            model.zero_grads();
            let l_sc = source_classification_loss(model, LabeledBatch { inputs: &x, labels: &y })?;
            check_finite(l_sc, || format!("pretrain epoch {epoch} step {step}: source loss {l_sc}"))?;
            apply_update(model, config, UpdateScope::All)?;
            total += l_sc;
            log.push(StepRecord {
                phase: "pretrain".into(),
                epoch,
                step,
                l_sc,
                l_target_pseudo: 0.0,
                l_st: l_sc,
                l_h: 0.0,
                domain_loss: None,
            });
        }
        let predicted = model.classify(&source.features)?.labels();
        let correct = predicted.iter().zip(&source.labels).filter(|(p, t)| p == t).count();
        records.push(PretrainRecord {
            epoch,
            l_sc: total / plan.len().max(1) as f64,
            source_accuracy: correct as f64 / source.len().max(1) as f64,
        });
    }
    Ok(records)
}

/// Paired (source batch, target batch) index lists for one adaptation
/// epoch: as many steps as the larger plan, the smaller one cycling.
pub fn epoch_pairs(
    source: &LabeledDataset,
    target_len: usize,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let src = source_plan(source, config, derive_seed(config.seed, "adapt-source", epoch as u64))?;
    let tgt = natural_batches(target_len, config.batch_size, derive_seed(config.seed, "adapt-target", epoch as u64))?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Sampler("adaptation needs non-empty source and target domains".into()));
    }
    let steps = src.len().max(tgt.len());
    Ok((0..steps)
        .map(|i| (src.batches[i % src.len()].clone(), tgt.batches[i % tgt.len()].clone()))
        .collect())
}

/// Target holdout evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_mean_accuracy: f64,
    pub overall_accuracy: f64,
}

pub fn evaluate(model: &ModelParams, dataset: &LabeledDataset) -> Result<Evaluation> {
    let predicted = model.classify(&dataset.features)?.labels();
    let confusion = ConfusionMatrix::from_predictions(&dataset.labels, &predicted, dataset.num_classes)?;
    Ok(Evaluation {
        per_class_accuracy: confusion.per_class_accuracy()?,
        per_class_mean_accuracy: per_class_mean_accuracy(&confusion)?,
        overall_accuracy: confusion.overall_accuracy(),
        confusion,
    })
}

/// Step A: pseudo-labels with the per-class top-k% mask for this epoch.
pub fn pseudo_label_step(model: &ModelParams, target: &LabeledDataset, config: &TrainConfig, epoch: usize) -> Result<PseudoLabelSet> {
    let assignments = assign_pseudo_labels(model, &target.features)?;
    select_top_k_per_class(&assignments, config.k_schedule.advance_k(epoch), target.num_classes)
}

fn epoch_record(
    model: &ModelParams,
    holdout: &LabeledDataset,
    epoch: usize,
    losses: &[LossBreakdown],
    domain_losses: &[f64],
) -> Result<EpochRecord> {
    let eval = evaluate(model, holdout)?;
    Ok(EpochRecord {
        epoch,
        loss: LossBreakdown::mean(losses),
        domain_loss: (!domain_losses.is_empty()).then(|| domain_losses.iter().sum::<f64>() / domain_losses.len() as f64),
        per_class_mean_accuracy: eval.per_class_mean_accuracy,
        overall_accuracy: eval.overall_accuracy,
        per_class_accuracy: eval.per_class_accuracy,
        estimated_distribution: None,
        k: None,
        selected: None,
        pseudo_label_accuracy: None,
        discriminator_accuracy: None,
        warnings: Vec::new(),
    })
}

fn step_record(phase: &str, epoch: usize, step: usize, loss: &LossBreakdown, domain_loss: Option<f64>) -> StepRecord {
    StepRecord {
        phase: phase.into(),
        epoch,
        step,
        l_sc: loss.l_sc,
        l_target_pseudo: loss.l_target_pseudo,
        l_st: loss.l_st,
        l_h: loss.l_h,
        domain_loss,
    }
}

/// One COAL epoch: step A assigns pseudo-labels, step B takes one combined
/// step per paired batch. Ablation flags remove terms from the gradient.
pub fn run_coal_epoch(
    model: &mut ModelParams,
    domains: &Domains,
    config: &TrainConfig,
    epoch: usize,
    log: &mut Vec<StepRecord>,
) -> Result<EpochRecord> {
    let target = &domains.target_train;
    let pseudo = pseudo_label_step(model, target, config, epoch)?;
    let mut warnings = Vec::new();
    if pseudo.selected() == 0 {
        warnings.push(format!("epoch {epoch}: no pseudo-labels selected, training on source loss only"));
    }
    let active = config.ablations.active_terms();
    let mut losses = Vec::new();
    for (step, (src_idx, tgt_idx)) in epoch_pairs(&domains.source, target.len(), config, epoch)?.into_iter().enumerate() {
        let (xs, ys) = domains.source.batch(&src_idx);
        let xt = target.features.select_rows(&tgt_idx);
        let labels: Vec<usize> = tgt_idx.iter().map(|&i| pseudo.labels[i]).collect();
        let masks: Vec<bool> = tgt_idx.iter().map(|&i| pseudo.masks[i]).collect();
        model.zero_grads();
        let loss = adaptive_objective(
            model,
            LabeledBatch { inputs: &xs, labels: &ys },
            PseudoBatch {
                inputs: &xt,
                labels: &labels,
                masks: &masks,
            },
            config.alpha,
            active,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("coal epoch {epoch} step {step}: {loss:?}"),
            });
        }
        apply_update(model, config, UpdateScope::All)?;
        log.push(step_record("adapt", epoch, step, &loss, None));
        losses.push(loss);
    }
    let mut record = epoch_record(model, &domains.target_holdout, epoch, &losses, &[])?;
    record.k = Some(pseudo.k);
    record.selected = Some(pseudo.selected());
    record.pseudo_label_accuracy = pseudo.selected_accuracy(&target.labels);
    record.estimated_distribution = estimate_target_distribution(&pseudo).ok().map(Vec::from);
    record.warnings = warnings;
    Ok(record)
}

/// Source cross-entropy only, on the same batch schedule as an adaptation epoch.
pub fn run_source_only_epoch(
    model: &mut ModelParams,
    domains: &Domains,
    config: &TrainConfig,
    epoch: usize,
    log: &mut Vec<StepRecord>,
) -> Result<EpochRecord> {
    let mut losses = Vec::new();
    for (step, (src_idx, _)) in epoch_pairs(&domains.source, domains.target_train.len(), config, epoch)?
        .into_iter()
        .enumerate()
    {
        let (xs, ys) = domains.source.batch(&src_idx);
        model.zero_grads();
        let l_sc = source_classification_loss(model, LabeledBatch { inputs: &xs, labels: &ys })?;
        check_finite(l_sc, || format!("source-only epoch {epoch} step {step}: loss {l_sc}"))?;
        apply_update(model, config, UpdateScope::All)?;
        let loss = LossBreakdown::new(l_sc, 0.0, 0.0, 0.0);
        log.push(step_record("adapt", epoch, step, &loss, None));
        losses.push(loss);
    }
    epoch_record(model, &domains.target_holdout, epoch, &losses, &[])
}

/// Source cross-entropy plus an adversarial domain loss: a linear domain
/// discriminator on the unit-normalized embeddings, trained to separate the domains, with
/// its gradient reversed (coefficient `domain_weight`) into the extractor.
pub fn run_marginal_align_epoch(
    model: &mut ModelParams,
    domains: &Domains,
    config: &TrainConfig,
    epoch: usize,
    log: &mut Vec<StepRecord>,
) -> Result<EpochRecord> {
    if model.discriminator.is_none() {
        return Err(Error::Usage("marginal alignment needs a model with a domain discriminator".into()));
    }
    let target = &domains.target_train;
    let mut losses = Vec::new();
    let mut domain_losses = Vec::new();
    for (step, (src_idx, tgt_idx)) in epoch_pairs(&domains.source, target.len(), config, epoch)?.into_iter().enumerate() {
        let (xs, ys) = domains.source.batch(&src_idx);
        let xt = target.features.select_rows(&tgt_idx);
        model.zero_grads();
        let l_sc = source_classification_loss(model, LabeledBatch { inputs: &xs, labels: &ys })?;

        let cache_s = model.forward(&xs)?;
        let cache_t = model.forward(&xt)?;
        let features = cache_s.normalized.vstack(&cache_t.normalized)?;
        let domain_labels: Vec<usize> = std::iter::repeat_n(0, xs.rows()).chain(std::iter::repeat_n(1, xt.rows())).collect();
        let logits = model.discriminator_logits(&features)?;
        let ce = softmax_cross_entropy(&logits, &domain_labels, &vec![true; domain_labels.len()])?;
        let grad_u = model.discriminator_backward(&features, &ce.grad, 1.0)?;
        let reversed = -config.domain_weight;
        let ns = xs.rows();
        let split = |range: std::ops::Range<usize>| grad_u.select_rows(&range.collect::<Vec<_>>());
        model.backward_normalized(&cache_s, &split(0..ns), reversed)?;
        model.backward_normalized(&cache_t, &split(ns..features.rows()), reversed)?;

        let loss = LossBreakdown::new(l_sc, 0.0, 0.0, 0.0);
        check_finite(l_sc + ce.loss, || format!("marginal-align epoch {epoch} step {step}: {l_sc}, {}", ce.loss))?;
        apply_update(model, config, UpdateScope::All)?;
        log.push(step_record("adapt", epoch, step, &loss, Some(ce.loss)));
        losses.push(loss);
        domain_losses.push(ce.loss);
    }
    let mut record = epoch_record(model, &domains.target_holdout, epoch, &losses, &domain_losses)?;
    record.discriminator_accuracy = Some(discriminator_accuracy(model, domains, epoch)?);
    Ok(record)
}

/// Domain-classification accuracy on the target holdout plus an equally
/// sized seeded sample of the source.
pub fn discriminator_accuracy(model: &ModelParams, domains: &Domains, epoch: usize) -> Result<f64> {
    let mut idx: Vec<usize> = (0..domains.source.len()).collect();
    idx.shuffle(&mut rng_for(domains.seed, "discriminator-probe", epoch as u64));
    idx.truncate(domains.target_holdout.len());
    let es = model.forward(&domains.source.features.select_rows(&idx))?.normalized;
    let et = model.forward(&domains.target_holdout.features)?.normalized;
    let ps = model.discriminate_domain(&es)?;
    let pt = model.discriminate_domain(&et)?;
    let correct = ps.iter().filter(|&&p| p < 0.5).count() + pt.iter().filter(|&&p| p >= 0.5).count();
    Ok(correct as f64 / (ps.len() + pt.len()).max(1) as f64)
}

pub fn run_adaptation_epoch(
    model: &mut ModelParams,
    domains: &Domains,
    config: &TrainConfig,
    epoch: usize,
    log: &mut Vec<StepRecord>,
) -> Result<EpochRecord> {
    match config.method {
        Method::Coal => run_coal_epoch(model, domains, config, epoch, log),
        Method::SourceOnly => run_source_only_epoch(model, domains, config, epoch, log),
        Method::MarginalAlign => run_marginal_align_epoch(model, domains, config, epoch, log),
    }
}

/// A finished run: report, trained model, per-step log and the data it saw.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: ModelParams,
    pub steps: Vec<StepRecord>,
    pub domains: Domains,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.train.validate()?;
    let domains = prepare_domains(config)?;
    run_with_domains(config, domains)
}

/// Runs pretraining and adaptation on already prepared domains.
pub fn run_with_domains(config: &ExperimentConfig, domains: Domains) -> Result<RunOutcome> {
    let train = &config.train;
    train.validate()?;
    let start = Instant::now();
    let mut model = build_model(train, domains.source.feature_dim(), domains.source.num_classes)?;
    let mut steps = Vec::new();
    let pretrain_records = pretrain(&mut model, &domains.source, train, &mut steps)?;
    let mut timing = Timing {
        pretrain_seconds: start.elapsed().as_secs_f64(),
        ..Timing::default()
    };
    let mut epochs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let t = Instant::now();
        epochs.push(run_adaptation_epoch(&mut model, &domains, train, epoch, &mut steps)?);
        timing.epoch_seconds.push(t.elapsed().as_secs_f64());
    }

    let eval = evaluate(&model, &domains.target_holdout)?;
    let predicted = model.classify(&domains.target_train.features)?.labels();
    let mut predicted_counts = vec![0usize; domains.target_train.num_classes];
    for p in predicted {
        predicted_counts[p] += 1;
    }
    let estimated = LabelDistribution::from_counts(&predicted_counts)?;
    let truth = domains.target_train.label_distribution()?;
    let summary = RunSummary {
        per_class_mean_accuracy: eval.per_class_mean_accuracy,
        overall_accuracy: eval.overall_accuracy,
        per_class_accuracy: eval.per_class_accuracy,
        confusion: eval.confusion,
        distribution_gap: compare_distributions(&estimated, &truth)?,
        estimated_distribution: estimated.into(),
        true_distribution: truth.into(),
    };
    timing.total_seconds = start.elapsed().as_secs_f64();
    let metrics = RunMetrics {
        schema_version: REPORT_SCHEMA_VERSION,
        label: train.run_label(),
        method: train.method,
        task: config.task_name(),
        degree: config.data.degree,
        seed: train.seed,
        data_seed: domains.seed,
        num_classes: domains.source.num_classes,
        source_counts: domains.source.class_counts(),
        target_counts: domains.target_train.class_counts(),
        holdout_counts: domains.target_holdout.class_counts(),
        config: train.clone(),
        pretrain: pretrain_records,
        epochs,
        summary,
    };
    Ok(RunOutcome {
        report: RunReport { metrics, timing },
        model,
        steps,
        domains,
    })
}

/// Writes `report.json`, `metrics.jsonl`, `checkpoint.json`, `config.toml`
/// and the three dataset splits (CSV plus manifest) under `data/`.
pub fn write_outputs(outcome: &RunOutcome, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    let mut jsonl = String::new();
    for step in &outcome.steps {
        jsonl.push_str(&serde_json::to_string(step)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("metrics.jsonl"), jsonl)?;
    outcome.model.save(&dir.join("checkpoint.json"))?;
    std::fs::write(dir.join("config.toml"), config.to_toml_string()?)?;

    let d = &outcome.domains;
    let mut input_hashes = std::collections::BTreeMap::new();
    for path in &d.inputs {
        input_hashes.insert(path.display().to_string(), crate::data::sha256_hex(&std::fs::read(path)?));
    }
    let data_dir = dir.join("data");
    for (stem, ds, shift) in [
        ("source", &d.source, Some(d.source_shift.clone())),
        ("target-train", &d.target_train, Some(d.target_shift.clone())),
        ("target-holdout", &d.target_holdout, Some(d.target_shift.clone())),
    ] {
        let mut manifest = DatasetManifest::describe(ds, shift, d.seed);
        manifest.source_hashes = input_hashes.clone();
        manifest.write_with_data(ds, &data_dir, stem)?;
    }
    Ok(())
}
