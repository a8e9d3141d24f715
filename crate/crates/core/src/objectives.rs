//! The COAL losses: prototype classification on source data, the masked
//! pseudo-label term, and the minimax entropy term routed through a gradient
//! reversal boundary, plus the label-shift lower-bound diagnostic.
//!
//! Every loss function here runs its own forward pass and *accumulates*
//! gradients into the model's parameter blocks; callers zero them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LogitGradient, ModelParams};
use crate::numerics::{mean_entropy, softmax_cross_entropy, GrlCoefficient, Tensor2};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Per-step loss values. `l_st = l_sc + l_target_pseudo`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sc: f64,
    pub l_target_pseudo: f64,
    pub l_st: f64,
    pub l_h: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(l_sc: f64, l_target_pseudo: f64, l_h: f64, alpha: f64) -> Self {
        Self {
            l_sc,
            l_target_pseudo,
            l_st: l_sc + l_target_pseudo,
            l_h,
            alpha,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sc, self.l_target_pseudo, self.l_st, self.l_h].iter().all(|v| v.is_finite())
    }

    /// Element-wise mean over a list of breakdowns (zero for an empty list).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(sum(|b| b.l_sc), sum(|b| b.l_target_pseudo), sum(|b| b.l_h), items[0].alpha)
    }
}

/// A class-prior vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(proportions: Vec<f64>) -> Result<Self> {
        if proportions.is_empty() {
            return Err(Error::InvalidDistribution("no classes".into()));
        }
        if proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("negative or non-finite entry in {proportions:?}")));
        }
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("proportions sum to {sum}")));
        }
        Ok(Self(proportions))
    }

    /// Normalizes nonnegative weights (or counts) into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidDistribution(format!("weights {weights:?} have no mass")));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        Self::from_weights(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; classes])
    }

    pub fn proportions(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Jensen-Shannon divergence in nats: `½KL(p‖m) + ½KL(q‖m)`, `m = (p+q)/2`.
    pub fn js_divergence(&self, other: &LabelDistribution) -> Result<f64> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::InvalidDistribution(format!(
                "cannot compare {} and {} classes",
                self.num_classes(),
                other.num_classes()
            )));
        }
        let kl_to_mid = |p: f64, q: f64| {
            let m = 0.5 * (p + q);
            if p > 0.0 {
                p * (p / m).ln()
            } else {
                0.0
            }
        };
        let js: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&p, &q)| 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p))
            .sum();
        Ok(js.clamp(0.0, std::f64::consts::LN_2))
    }

    /// Square root of [`Self::js_divergence`].
    pub fn js_distance(&self, other: &LabelDistribution) -> Result<f64> {
        Ok(self.js_divergence(other)?.sqrt())
    }

    pub fn l1_distance(&self, other: &LabelDistribution) -> Result<f64> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::InvalidDistribution("class count mismatch".into()));
        }
        Ok(self.0.iter().zip(&other.0).map(|(p, q)| (p - q).abs()).sum())
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.0
    }
}

/// Labeled inputs for one source mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct LabeledBatch<'a> {
    pub inputs: &'a Tensor2,
    pub labels: &'a [usize],
}

/// Target inputs with pseudo-labels and selection masks.
#[derive(Clone, Copy, Debug)]
pub struct PseudoBatch<'a> {
    pub inputs: &'a Tensor2,
    pub labels: &'a [usize],
    pub masks: &'a [bool],
}

/// Mean cross-entropy of the cosine classifier over a labeled batch.
pub fn source_classification_loss(model: &mut ModelParams, batch: LabeledBatch<'_>) -> Result<f64> {
    if batch.inputs.rows() == 0 {
        return Err(Error::Usage("source batch is empty".into()));
    }
    let cache = model.forward(batch.inputs)?;
    let mask = vec![true; batch.labels.len()];
    let ce = softmax_cross_entropy(&cache.logits, batch.labels, &mask)?;
    model.backward(&cache, &[LogitGradient::plain(ce.grad)])?;
    Ok(ce.loss)
}

/// Source classification plus masked mean cross-entropy on pseudo-labels.
/// Returns `(l_sc, l_target_pseudo)`. With every mask off this is exactly
/// [`source_classification_loss`].
pub fn self_training_loss(
    model: &mut ModelParams,
    source: LabeledBatch<'_>,
    target: PseudoBatch<'_>,
) -> Result<(f64, f64)> {
    let l_sc = source_classification_loss(model, source)?;
    if !target.masks.iter().any(|&m| m) {
        return Ok((l_sc, 0.0));
    }
    let cache = model.forward(target.inputs)?;
    let ce = softmax_cross_entropy(&cache.logits, target.labels, target.masks)?;
    model.backward(&cache, &[LogitGradient::plain(ce.grad)])?;
    Ok((l_sc, ce.loss))
}

fn entropy_term(grad: Tensor2, alpha: f64) -> LogitGradient {
    // C descends on -α·L_H; the reversal hands F the gradient of +α·L_H.
    LogitGradient {
        grad,
        scale: -alpha,
        reversal: Some(GrlCoefficient::unit()),
    }
}

/// Mean prediction entropy on a target batch. The classifier receives the
/// gradient of `-α·L_H` (it maximizes entropy), the extractor that of
/// `+α·L_H` (it minimizes entropy). Returns `L_H`.
pub fn entropy_objective(model: &mut ModelParams, target: &Tensor2, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Usage(format!("alpha must be >= 0, got {alpha}")));
    }
    let cache = model.forward(target)?;
    let h = mean_entropy(&cache.probabilities)?;
    if alpha > 0.0 {
        model.backward(&cache, &[entropy_term(h.grad, alpha)])?;
    }
    Ok(h.loss)
}

/// Which terms of the adaptive objective contribute gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub pseudo: bool,
    pub entropy: bool,
}

impl ActiveTerms {
    pub const ALL: ActiveTerms = ActiveTerms {
        pseudo: true,
        entropy: true,
    };
}

/// One combined backward pass of `L_ST` together with the minimax entropy
/// routing: source CE, then a single target forward whose pseudo-label and
/// entropy gradients merge at the `F`/`C` boundary.
///
/// Disabled terms are still measured (so the breakdown is always populated)
/// but never backpropagated. A disabled pseudo term reports 0.
pub fn adaptive_objective(
    model: &mut ModelParams,
    source: LabeledBatch<'_>,
    target: PseudoBatch<'_>,
    alpha: f64,
    active: ActiveTerms,
) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(Error::Usage(format!("alpha must be >= 0, got {alpha}")));
    }
    let l_sc = source_classification_loss(model, source)?;
    let cache = model.forward(target.inputs)?;
    let mut terms = Vec::with_capacity(2);
    let mut l_pseudo = 0.0;
    if active.pseudo && target.masks.iter().any(|&m| m) {
        let ce = softmax_cross_entropy(&cache.logits, target.labels, target.masks)?;
        l_pseudo = ce.loss;
        terms.push(LogitGradient::plain(ce.grad));
    }
    let h = mean_entropy(&cache.probabilities)?;
    if active.entropy && alpha > 0.0 {
        terms.push(entropy_term(h.grad, alpha));
    }
    model.backward(&cache, &terms)?;
    Ok(LossBreakdown::new(l_sc, l_pseudo, h.loss, alpha))
}

/// `½ (d_JS(p, q) − d_feat)²` with `d_JS` the Jensen-Shannon distance in
/// nats. A lower bound on the summed source and target errors; `d_feat`
/// is the feature-space JS distance, 0 if unknown.
pub fn js_label_bound(p: &LabelDistribution, q: &LabelDistribution, feature_js_distance: f64) -> Result<f64> {
    if !(0.0..=std::f64::consts::LN_2.sqrt() + 1e-12).contains(&feature_js_distance) {
        return Err(Error::Usage(format!(
            "feature JS distance must lie in [0, sqrt(ln 2)], got {feature_js_distance}"
        )));
    }
    let d = p.js_distance(q)?;
    Ok(0.5 * (d - feature_js_distance).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, DEFAULT_TEMPERATURE};
    use crate::numerics::ParamSet;

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(
            Architecture {
                input_dim: 2,
                layer_dims: vec![8, 6],
                num_classes: 3,
                temperature: DEFAULT_TEMPERATURE,
                discriminator: false,
            },
            seed,
        )
        .unwrap()
    }

    fn grads(m: &ModelParams) -> Vec<Tensor2> {
        m.blocks().iter().map(|b| b.grad.clone()).collect()
    }

    fn inputs() -> Tensor2 {
        Tensor2::from_rows(&[[0.5, -1.0], [1.5, 0.2], [-0.7, 0.9], [0.1, 1.0]]).unwrap()
    }

    #[test]
    fn breakdown_identity_holds() {
        let b = LossBreakdown::new(0.3, 0.25, 1.0, 0.1);
        assert_eq!(b.l_st, 0.3 + 0.25);
        let m = LossBreakdown::mean(&[b, LossBreakdown::new(0.1, 0.05, 0.5, 0.1)]);
        assert!((m.l_st - (m.l_sc + m.l_target_pseudo)).abs() < 1e-12);
    }

    #[test]
    fn label_distribution_validation() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.1, 1.1]).is_err());
        assert_eq!(LabelDistribution::from_counts(&[1, 3]).unwrap().proportions(), &[0.25, 0.75]);
        let json = serde_json::to_string(&LabelDistribution::uniform(2).unwrap()).unwrap();
        assert_eq!(json, "[0.5,0.5]");
        assert!(serde_json::from_str::<LabelDistribution>("[0.9,0.9]").is_err());
    }

    #[test]
    fn empty_source_batch_is_rejected() {
        let mut m = model(1);
        let empty = Tensor2::zeros(0, 2);
        let err = source_classification_loss(&mut m, LabeledBatch { inputs: &empty, labels: &[] });
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn uninformative_head_gives_log_c() {
        let mut m = model(3);
        m.prototypes.value = Tensor2::zeros(6, 3);
        let x = inputs();
        let l = source_classification_loss(&mut m, LabeledBatch { inputs: &x, labels: &[0, 1, 2, 0] }).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let x = inputs();
        let labels = [0, 1, 2, 0];
        let doubled = x.vstack(&x).unwrap();
        let doubled_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let mut m = model(4);
        let a = source_classification_loss(&mut m, LabeledBatch { inputs: &x, labels: &labels }).unwrap();
        let b = source_classification_loss(&mut m, LabeledBatch { inputs: &doubled, labels: &doubled_labels }).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn all_masks_off_reduces_to_source_loss() {
        let x = inputs();
        let source = LabeledBatch { inputs: &x, labels: &[0, 1, 2, 0] };
        let mut a = model(5);
        let mut b = a.clone();
        let l_sc = source_classification_loss(&mut a, source).unwrap();
        let (l_sc2, l_pl) = self_training_loss(
            &mut b,
            source,
            PseudoBatch { inputs: &x, labels: &[1, 1, 1, 1], masks: &[false; 4] },
        )
        .unwrap();
        assert_eq!(l_sc, l_sc2);
        assert_eq!(l_pl, 0.0);
        assert_eq!(grads(&a), grads(&b));
    }

    #[test]
    fn pseudo_term_matches_hand_computation() {
        // Two target rows, one masked: the term is the CE of that row alone.
        let x = inputs();
        let t = Tensor2::from_rows(&[[0.3, 0.4], [-1.0, 2.0]]).unwrap();
        let mut m = model(6);
        let probs = m.classify(&t).unwrap().probabilities;
        let expected = -probs.get(1, 2).ln();
        let (_, l_pl) = self_training_loss(
            &mut m,
            LabeledBatch { inputs: &x, labels: &[0, 1, 2, 0] },
            PseudoBatch { inputs: &t, labels: &[0, 2], masks: &[false, true] },
        )
        .unwrap();
        assert!((l_pl - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_contributes_nothing() {
        let mut m = model(7);
        let h = entropy_objective(&mut m, &inputs(), 0.0).unwrap();
        assert!(h > 0.0);
        assert!(grads(&m).iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn entropy_routing_flips_classifier_sign() {
        let alpha = 0.1;
        let x = inputs();
        let mut routed = model(8);
        entropy_objective(&mut routed, &x, alpha).unwrap();

        let mut naive = model(8);
        let cache = naive.forward(&x).unwrap();
        let h = mean_entropy(&cache.probabilities).unwrap();
        naive.backward(&cache, &[LogitGradient::plain(h.grad)]).unwrap();

        let n_extractor = 2 * routed.layers.len();
        for (i, (r, n)) in grads(&routed).iter().zip(grads(&naive)).enumerate() {
            let factor = if i < n_extractor { alpha } else { -alpha };
            for (a, b) in r.data().iter().zip(n.data()) {
                assert_eq!(*a, factor * b, "block {i}");
            }
        }
    }

    #[test]
    fn js_bound_examples() {
        let p = LabelDistribution::new(vec![1.0, 0.0]).unwrap();
        let q = LabelDistribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(js_label_bound(&p, &p, 0.0).unwrap(), 0.0);
        assert!((js_label_bound(&p, &q, 0.0).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-12);
        let a = LabelDistribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        let b = LabelDistribution::new(vec![0.1, 0.3, 0.6]).unwrap();
        assert_eq!(js_label_bound(&a, &b, 0.1).unwrap(), js_label_bound(&b, &a, 0.1).unwrap());
        let d = a.js_distance(&b).unwrap();
        assert!(js_label_bound(&a, &b, d).unwrap() < 1e-30);
        assert!(js_label_bound(&a, &b, 2.0).is_err());
    }
}
