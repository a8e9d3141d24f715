//! Pseudo-label assignment and class-balanced confidence selection.
//!
//! Selection is per pseudo-class: within each predicted class the
//! `⌈k% · n_class⌉` most confident samples are kept (at least one when the
//! class is nonempty and `k > 0`). Confidence ties go to the lower sample
//! index.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor2;
use crate::objectives::LabelDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoAssignment {
    pub label: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub masks: Vec<bool>,
    pub num_classes: usize,
    /// Selection percentage used to build the set.
    pub k: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn selected(&self) -> usize {
        self.masks.iter().filter(|&&m| m).count()
    }

    /// Fraction of selected samples whose pseudo-label matches `truth`.
    pub fn selected_accuracy(&self, truth: &[usize]) -> Option<f64> {
        let selected = self.selected();
        if selected == 0 {
            return None;
        }
        let correct = (0..self.len())
            .filter(|&i| self.masks[i] && self.labels[i] == truth[i])
            .count();
        Some(correct as f64 / selected as f64)
    }

    /// Writes `sample_id,pseudo_label,confidence,mask` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample_id", "pseudo_label", "confidence", "mask"])?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                self.labels[i].to_string(),
                self.confidences[i].to_string(),
                u8::from(self.masks[i]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `k(epoch) = min(k0 + epoch · k_step, k_max)`, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSchedule {
    pub k0: f64,
    pub k_step: f64,
    pub k_max: f64,
}

impl Default for KSchedule {
    fn default() -> Self {
        Self {
            k0: 5.0,
            k_step: 5.0,
            k_max: 30.0,
        }
    }
}

impl KSchedule {
    /// Preset for the easier digit transfer tasks.
    pub fn digits() -> Self {
        Self {
            k0: 20.0,
            k_step: 5.0,
            k_max: 50.0,
        }
    }

    /// Preset for the hardest digit transfer task.
    pub fn svhn() -> Self {
        Self {
            k0: 5.0,
            k_step: 5.0,
            k_max: 10.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" | "office" => Some(Self::default()),
            "digits" => Some(Self::digits()),
            "svhn" => Some(Self::svhn()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=100.0).contains(&v);
        if !(ok(self.k0) && ok(self.k_max) && self.k_step >= 0.0 && self.k0 <= self.k_max) {
            return Err(Error::Config(format!("invalid k schedule {self:?}")));
        }
        Ok(())
    }

    /// Epochs count adaptation epochs from 0; pretraining does not advance k.
    pub fn advance_k(&self, epoch: usize) -> f64 {
        (self.k0 + epoch as f64 * self.k_step).min(self.k_max)
    }
}

/// Arg-max pseudo-labels from a probability matrix. Ties go to the lowest class.
pub fn pseudo_labels_from_probabilities(probabilities: &Tensor2) -> Vec<PseudoAssignment> {
    probabilities
        .iter_rows()
        .map(|row| {
            let mut label = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[label] {
                    label = j;
                }
            }
            PseudoAssignment {
                label,
                confidence: row[label],
            }
        })
        .collect()
}

pub fn assign_pseudo_labels(model: &ModelParams, target: &Tensor2) -> Result<Vec<PseudoAssignment>> {
    Ok(pseudo_labels_from_probabilities(&model.classify(target)?.probabilities))
}

/// Number of samples kept from a pseudo-class of size `n` at `k` percent.
pub fn selection_count(n: usize, k: f64) -> usize {
    if n == 0 || k <= 0.0 {
        return 0;
    }
    // Multiply before dividing so integer percentages round exactly.
    let raw = (k * n as f64 / 100.0).ceil() as usize;
    raw.clamp(1, n)
}

pub fn select_top_k_per_class(assignments: &[PseudoAssignment], k: f64, num_classes: usize) -> Result<PseudoLabelSet> {
    if !(0.0..=100.0).contains(&k) {
        return Err(Error::Usage(format!("k must be a percentage in [0, 100], got {k}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, a) in assignments.iter().enumerate() {
        let bucket = by_class.get_mut(a.label).ok_or(Error::LabelOutOfRange {
            row: i,
            label: a.label,
            classes: num_classes,
        })?;
        bucket.push(i);
    }
    let mut masks = vec![false; assignments.len()];
    for members in &mut by_class {
        members.sort_by(|&a, &b| {
            assignments[b]
                .confidence
                .total_cmp(&assignments[a].confidence)
                .then(a.cmp(&b))
        });
        for &i in members.iter().take(selection_count(members.len(), k)) {
            masks[i] = true;
        }
    }
    Ok(PseudoLabelSet {
        labels: assignments.iter().map(|a| a.label).collect(),
        confidences: assignments.iter().map(|a| a.confidence).collect(),
        masks,
        num_classes,
        k,
    })
}

/// Class proportions among the selected pseudo-labels.
pub fn estimate_target_distribution(pseudo: &PseudoLabelSet) -> Result<LabelDistribution> {
    let mut counts = vec![0usize; pseudo.num_classes];
    for (label, &m) in pseudo.labels.iter().zip(&pseudo.masks) {
        if m {
            counts[*label] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Estimation("no pseudo-labels are selected".into()));
    }
    LabelDistribution::from_counts(&counts)
}
