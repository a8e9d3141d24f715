//! Class-imbalanced domain adaptation on desk-scale data.
//!
//! * [`numerics`]: dense tensors, hand-derived kernels, SGD, gradient checking
//! * [`model`]: MLP extractor + temperature-scaled cosine prototype classifier
//! * [`objectives`]: source CE, pseudo-label CE, minimax entropy, label-shift bound
//! * [`selftrain`]: pseudo-labels, per-class top-k% selection, k schedule
//! * [`data`]: datasets, twin-Gaussian domains, IDX/CSV, Pareto label shift, samplers
//! * [`trainer`]: pretraining, the COAL loop, baselines, experiment driver
//! * [`evaluation`]: per-class mean accuracy, distribution comparison, projections, tables

pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod selftrain;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Architecture, ModelParams, Prediction};
pub use numerics::{GrlCoefficient, ParamBlock, ParamSet, Tensor2};
pub use objectives::{LabelDistribution, LossBreakdown};
