//! Feature extractor `F` (ReLU MLP) composed with the temperature-scaled
//! cosine prototype classifier `C`, plus an optional linear domain
//! discriminator used by the marginal-alignment baseline.
//!
//! Class logits are `s_i = <F(x)/‖F(x)‖, w_i> / T` where `w_i` is column `i`
//! of the prototype matrix `W` (d × c). `W` is never re-normalized after
//! initialization.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    l2_normalize_rows, l2_normalize_rows_backward, linear_backward, linear_forward, relu, relu_backward,
    softmax_rows, GrlCoefficient, ParamBlock, ParamSet, Tensor2, NORM_EPSILON,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the extractor's layers; the last entry is the embedding dimension `d`.
    pub layer_dims: Vec<usize>,
    pub num_classes: usize,
    pub temperature: f64,
    pub discriminator: bool,
}

impl Architecture {
    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap_or(&self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.iter().any(|&d| d == 0) || self.input_dim == 0 {
            return Err(Error::Config(format!(
                "extractor needs at least one non-empty layer, got input {} layers {:?}",
                self.input_dim, self.layer_dims
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: ParamBlock,
    pub bias: ParamBlock,
}

/// Which side of the `F`/`C` split a parameter block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Extractor,
    Classifier,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub layers: Vec<DenseLayer>,
    pub prototypes: ParamBlock,
    pub discriminator: Option<DenseLayer>,
    pub seed: u64,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Tensor2,
    pub pre_activations: Vec<Tensor2>,
    pub activations: Vec<Tensor2>,
    pub normalized: Tensor2,
    pub logits: Tensor2,
    pub probabilities: Tensor2,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Tensor2 {
        self.activations.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Tensor2,
    pub embeddings: Tensor2,
}

impl Prediction {
    pub fn labels(&self) -> Vec<usize> {
        self.probabilities.argmax_rows()
    }
}

/// Gradient of some loss w.r.t. the class logits, together with how it is
/// routed: `scale` multiplies every block contribution, and `reversal`
/// inserts a gradient reversal boundary between `C` and `F`.
#[derive(Clone, Debug)]
pub struct LogitGradient {
    pub grad: Tensor2,
    pub scale: f64,
    pub reversal: Option<GrlCoefficient>,
}

impl LogitGradient {
    pub fn plain(grad: Tensor2) -> Self {
        Self {
            grad,
            scale: 1.0,
            reversal: None,
        }
    }
}

fn gaussian_block(name: &str, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamBlock {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    ParamBlock::new(name, Tensor2::from_vec(rows, cols, data).expect("sized"))
}

impl ModelParams {
    /// He-normal extractor weights, zero biases, Gaussian prototypes with
    /// σ = 1/√d and unit-norm columns, zero discriminator.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = architecture.input_dim;
        for (i, &width) in architecture.layer_dims.iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            layers.push(DenseLayer {
                weights: gaussian_block(&format!("extractor.{i}.weight"), fan_in, width, std, &mut rng),
                bias: ParamBlock::new(format!("extractor.{i}.bias"), Tensor2::zeros(1, width)),
            });
            fan_in = width;
        }
        let d = architecture.embedding_dim();
        let c = architecture.num_classes;
        let mut prototypes = gaussian_block("classifier.prototypes", d, c, 1.0 / (d as f64).sqrt(), &mut rng);
        for j in 0..c {
            let norm = (0..d).map(|i| prototypes.value.get(i, j).powi(2)).sum::<f64>().sqrt();
            for i in 0..d {
                let v = prototypes.value.get(i, j) / norm.max(NORM_EPSILON);
                prototypes.value.set(i, j, v);
            }
        }
        let discriminator = architecture.discriminator.then(|| DenseLayer {
            weights: ParamBlock::new("discriminator.weight", Tensor2::zeros(d, 2)),
            bias: ParamBlock::new("discriminator.bias", Tensor2::zeros(1, 2)),
        });
        Ok(Self {
            architecture,
            layers,
            prototypes,
            discriminator,
            seed,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.architecture.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.num_classes
    }

    pub fn forward(&self, inputs: &Tensor2) -> Result<ForwardCache> {
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = activations.last().unwrap_or(inputs);
            let z = linear_forward(x, &layer.weights, &layer.bias)?;
            activations.push(relu(&z));
            pre_activations.push(z);
        }
        let embeddings = activations.last().unwrap_or(inputs);
        let normalized = l2_normalize_rows(embeddings, NORM_EPSILON);
        let logits = normalized.matmul(&self.prototypes.value)?.scaled(1.0 / self.temperature());
        let probabilities = softmax_rows(&logits);
        Ok(ForwardCache {
            input: inputs.clone(),
            pre_activations,
            activations,
            normalized,
            logits,
            probabilities,
        })
    }

    /// `F(x)`.
    pub fn extract_features(&self, inputs: &Tensor2) -> Result<Tensor2> {
        let mut x = inputs.clone();
        for layer in &self.layers {
            x = relu(&linear_forward(&x, &layer.weights, &layer.bias)?);
        }
        Ok(x)
    }

    pub fn classify(&self, inputs: &Tensor2) -> Result<Prediction> {
        let embeddings = self.extract_features(inputs)?;
        self.classify_embeddings(&embeddings)
    }

    /// Runs only the classifier head on precomputed embeddings.
    pub fn classify_embeddings(&self, embeddings: &Tensor2) -> Result<Prediction> {
        let logits = self.head_logits(embeddings)?;
        Ok(Prediction {
            probabilities: softmax_rows(&logits),
            embeddings: embeddings.clone(),
        })
    }

    pub fn head_logits(&self, embeddings: &Tensor2) -> Result<Tensor2> {
        if embeddings.cols() != self.prototypes.value.rows() {
            return Err(Error::Dimension {
                op: "classify",
                left: embeddings.shape(),
                right: self.prototypes.shape(),
            });
        }
        let normalized = l2_normalize_rows(embeddings, NORM_EPSILON);
        Ok(normalized.matmul(&self.prototypes.value)?.scaled(1.0 / self.temperature()))
    }

    /// ReLU on/off pattern over all hidden units for the given inputs.
    pub fn activation_pattern(&self, inputs: &Tensor2) -> Vec<bool> {
        let mut pattern = Vec::new();
        let mut x = inputs.clone();
        for layer in &self.layers {
            let z = match linear_forward(&x, &layer.weights, &layer.bias) {
                Ok(z) => z,
                Err(_) => return pattern,
            };
            pattern.extend(z.data().iter().map(|&v| v > 0.0));
            x = relu(&z);
        }
        pattern
    }

    /// Backpropagates one or more logit gradients from a single forward pass.
    ///
    /// Each term's classifier contribution is `scale · ∂/∂W`; its extractor
    /// contribution is `scale · (−λ if reversed) · ∂/∂θ_F`. With a single
    /// term the scale is applied at accumulation time, so the result is
    /// exactly `scale` times an unscaled pass.
    pub fn backward(&mut self, cache: &ForwardCache, terms: &[LogitGradient]) -> Result<()> {
        let inv_t = 1.0 / self.temperature();
        let embeddings = cache.embeddings();
        let mut routed: Vec<(Tensor2, f64)> = Vec::with_capacity(terms.len());
        for term in terms {
            if term.grad.shape() != cache.logits.shape() {
                return Err(Error::Dimension {
                    op: "ModelParams::backward",
                    left: term.grad.shape(),
                    right: cache.logits.shape(),
                });
            }
            let grad_w = cache.normalized.matmul_tn(&term.grad)?.scaled(inv_t);
            self.prototypes.accumulate(&grad_w, term.scale)?;
            let grad_u = term.grad.matmul_nt(&self.prototypes.value)?.scaled(inv_t);
            let grad_e = l2_normalize_rows_backward(embeddings, &grad_u, NORM_EPSILON)?;
            let factor = term.scale * term.reversal.map_or(1.0, |g| g.backward_factor());
            routed.push((grad_e, factor));
        }
        match routed.len() {
            0 => Ok(()),
            1 => {
                let (grad_e, factor) = routed.pop().expect("one term");
                self.backward_extractor(cache, grad_e, factor)
            }
            _ => {
                let mut total = Tensor2::zeros(embeddings.rows(), embeddings.cols());
                for (g, f) in &routed {
                    total.add_scaled(g, *f)?;
                }
                self.backward_extractor(cache, total, 1.0)
            }
        }
    }

    /// Like [`Self::backward_extractor`], for a gradient w.r.t. the
    /// unit-normalized embeddings.
    pub fn backward_normalized(&mut self, cache: &ForwardCache, grad_normalized: &Tensor2, scale: f64) -> Result<()> {
        let grad_e = l2_normalize_rows_backward(cache.embeddings(), grad_normalized, NORM_EPSILON)?;
        self.backward_extractor(cache, grad_e, scale)
    }

    /// Backpropagates an (unscaled) gradient w.r.t. the embeddings through
    /// the extractor, accumulating `scale ·` into each block.
    pub fn backward_extractor(&mut self, cache: &ForwardCache, grad_embeddings: Tensor2, scale: f64) -> Result<()> {
        let mut grad = grad_embeddings;
        for l in (0..self.layers.len()).rev() {
            let grad_pre = relu_backward(&cache.pre_activations[l], &grad)?;
            let input = if l == 0 { &cache.input } else { &cache.activations[l - 1] };
            let layer = &mut self.layers[l];
            grad = linear_backward(input, &mut layer.weights, &mut layer.bias, &grad_pre, scale)?;
        }
        Ok(())
    }

    /// Domain logits (column 0 = source, column 1 = target).
    pub fn discriminator_logits(&self, embeddings: &Tensor2) -> Result<Tensor2> {
        let head = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Usage("model was built without a domain discriminator".into()))?;
        linear_forward(embeddings, &head.weights, &head.bias)
    }

    /// Per-sample probability that the embedding comes from the target domain.
    pub fn discriminate_domain(&self, embeddings: &Tensor2) -> Result<Vec<f64>> {
        let p = softmax_rows(&self.discriminator_logits(embeddings)?);
        Ok((0..p.rows()).map(|r| p.get(r, 1)).collect())
    }

    /// Accumulates discriminator gradients and returns `∂L/∂embeddings`.
    pub fn discriminator_backward(&mut self, embeddings: &Tensor2, grad_logits: &Tensor2, scale: f64) -> Result<Tensor2> {
        let head = self
            .discriminator
            .as_mut()
            .ok_or_else(|| Error::Usage("model was built without a domain discriminator".into()))?;
        linear_backward(embeddings, &mut head.weights, &mut head.bias, grad_logits, scale)
    }

    pub fn block_roles(&self) -> Vec<BlockRole> {
        let mut roles = vec![BlockRole::Extractor; 2 * self.layers.len()];
        roles.push(BlockRole::Classifier);
        if self.discriminator.is_some() {
            roles.extend([BlockRole::Discriminator, BlockRole::Discriminator]);
        }
        roles
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.value.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            architecture: self.architecture.clone(),
            blocks: self
                .blocks()
                .iter()
                .map(|b| BlockRecord {
                    name: b.name.clone(),
                    rows: b.value.rows(),
                    cols: b.value.cols(),
                    values: b.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format `{}`", checkpoint.format)));
        }
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                checkpoint.version
            )));
        }
        let mut model = Self::init(checkpoint.architecture.clone(), checkpoint.seed)?;
        let mut blocks = model.blocks_mut();
        if blocks.len() != checkpoint.blocks.len() {
            return Err(Error::Consistency(format!(
                "checkpoint holds {} blocks, architecture needs {}",
                checkpoint.blocks.len(),
                blocks.len()
            )));
        }
        for (block, record) in blocks.iter_mut().zip(&checkpoint.blocks) {
            if block.name != record.name || block.shape() != (record.rows, record.cols) {
                return Err(Error::Consistency(format!(
                    "block `{}` {:?} does not match checkpoint `{}` ({}, {})",
                    block.name,
                    block.shape(),
                    record.name,
                    record.rows,
                    record.cols
                )));
            }
            block.value = Tensor2::from_vec(record.rows, record.cols, record.values.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

impl ParamSet for ModelParams {
    /// Extractor (weight, bias) pairs in layer order, then prototypes, then
    /// the discriminator (weight, bias) if present.
    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut out: Vec<&ParamBlock> = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weights);
            out.push(&layer.bias);
        }
        out.push(&self.prototypes);
        if let Some(d) = &self.discriminator {
            out.push(&d.weights);
            out.push(&d.bias);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut out: Vec<&mut ParamBlock> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.prototypes);
        if let Some(d) = &mut self.discriminator {
            out.push(&mut d.weights);
            out.push(&mut d.bias);
        }
        out
    }
}

pub const CHECKPOINT_FORMAT: &str = "coal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model document. See the README for the field layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub architecture: Architecture,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}
