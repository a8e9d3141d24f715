//! Dense 64-bit tensors and the hand-derived forward/backward kernels the
//! COAL network is built from.
//!
//! The model graph is static (input -> MLP -> row normalization -> cosine
//! head), so every kernel here exposes an explicit backward function instead
//! of recording onto a tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon used by [`l2_normalize_rows`] callers.
pub const NORM_EPSILON: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "Tensor2::from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equally sized rows. An empty slice yields a 0x0 tensor.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "Tensor2::from_rows",
                    left: (i, row.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-width tensor still has rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let dot: f64 = a_row.iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
                out.set(i, j, dot);
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensor2 {
        self.map(|v| factor * v)
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &Tensor2, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for row in self.iter_rows() {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor2 {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Index of the largest entry per row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub momentum: Tensor2,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor2::zeros(r, c),
            momentum: Tensor2::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// `grad += scale · contribution`.
    pub fn accumulate(&mut self, contribution: &Tensor2, scale: f64) -> Result<()> {
        self.grad.add_scaled(contribution, scale)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

/// Anything that owns an ordered list of parameter blocks.
pub trait ParamSet: Clone {
    fn blocks(&self) -> Vec<&ParamBlock>;
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grads(&mut self) {
        for b in self.blocks_mut() {
            b.zero_grad();
        }
    }
}

/// Coefficient of a gradient reversal boundary. Forward is the identity;
/// backward multiplies by `-lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlCoefficient(f64);

impl GrlCoefficient {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Usage(format!(
                "gradient reversal coefficient must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn unit() -> Self {
        Self(1.0)
    }

    pub fn lambda(self) -> f64 {
        self.0
    }

    /// Factor applied to gradients crossing the boundary.
    pub fn backward_factor(self) -> f64 {
        -self.0
    }

    pub fn backward(self, grad: &Tensor2) -> Tensor2 {
        grad.scaled(self.backward_factor())
    }
}

fn check_bias(op: &'static str, weights: &ParamBlock, bias: &ParamBlock) -> Result<()> {
    if bias.shape() != (1, weights.value.cols()) {
        return Err(Error::Dimension {
            op,
            left: weights.shape(),
            right: bias.shape(),
        });
    }
    Ok(())
}

/// `input · W + b`.
pub fn linear_forward(input: &Tensor2, weights: &ParamBlock, bias: &ParamBlock) -> Result<Tensor2> {
    if input.cols() != weights.value.rows() {
        return Err(Error::Dimension {
            op: "linear_forward",
            left: input.shape(),
            right: weights.shape(),
        });
    }
    check_bias("linear_forward", weights, bias)?;
    let mut out = input.matmul(&weights.value)?;
    let b = bias.value.row(0);
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Accumulates `scale · ∂L/∂W` and `scale · ∂L/∂b` given the unscaled
/// upstream gradient, and returns the unscaled gradient w.r.t. `input`.
pub fn linear_backward(
    input: &Tensor2,
    weights: &mut ParamBlock,
    bias: &mut ParamBlock,
    grad_out: &Tensor2,
    scale: f64,
) -> Result<Tensor2> {
    if grad_out.rows() != input.rows() || grad_out.cols() != weights.value.cols() {
        return Err(Error::Dimension {
            op: "linear_backward",
            left: grad_out.shape(),
            right: (input.rows(), weights.value.cols()),
        });
    }
    check_bias("linear_backward", weights, bias)?;
    let grad_w = input.matmul_tn(grad_out)?;
    weights.accumulate(&grad_w, scale)?;
    bias.accumulate(&grad_out.column_sums(), scale)?;
    grad_out.matmul_nt(&weights.value)
}

pub fn relu(input: &Tensor2) -> Tensor2 {
    input.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its pre-activation. The subgradient at 0 is 0.
pub fn relu_backward(pre_activation: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(Error::Dimension {
            op: "relu_backward",
            left: pre_activation.shape(),
            right: grad_out.shape(),
        });
    }
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Tensor2::from_vec(grad_out.rows(), grad_out.cols(), data)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Divides each row by its Euclidean norm, or by `epsilon` when the norm
/// does not exceed it.
pub fn l2_normalize_rows(input: &Tensor2, epsilon: f64) -> Tensor2 {
    let mut out = input.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let denom = row_norm(row).max(epsilon);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// Backward of [`l2_normalize_rows`]. For a row with norm `n > epsilon` and
/// output `u = x / n`, `∂L/∂x = (g - u (u·g)) / n`; otherwise `g / epsilon`.
pub fn l2_normalize_rows_backward(input: &Tensor2, grad_out: &Tensor2, epsilon: f64) -> Result<Tensor2> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Dimension {
            op: "l2_normalize_rows_backward",
            left: input.shape(),
            right: grad_out.shape(),
        });
    }
    let mut out = Tensor2::zeros(input.rows(), input.cols());
    for r in 0..input.rows() {
        let x = input.row(r);
        let g = grad_out.row(r);
        let n = row_norm(x);
        let dst = out.row_mut(r);
        if n > epsilon {
            let ug: f64 = x.iter().zip(g).map(|(xv, gv)| xv / n * gv).sum();
            for ((d, xv), gv) in dst.iter_mut().zip(x).zip(g) {
                *d = (gv - xv / n * ug) / n;
            }
        } else {
            for (d, gv) in dst.iter_mut().zip(g) {
                *d = gv / epsilon;
            }
        }
    }
    Ok(out)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Scalar loss together with its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor2,
}

/// Masked mean cross-entropy. Unmasked rows contribute neither loss nor
/// gradient; the mean is over `max(1, masked rows)`.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize], mask: &[bool]) -> Result<LossGrad> {
    let (rows, cols) = logits.shape();
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), mask.len()),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= cols) {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            classes: cols,
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    let denom = count.max(1) as f64;
    let mut grad = Tensor2::zeros(rows, cols);
    let mut total = 0.0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let log_p = log_softmax_row(logits.row(r));
        total -= log_p[labels[r]];
        let g = grad.row_mut(r);
        for (j, (gv, lp)) in g.iter_mut().zip(&log_p).enumerate() {
            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
            *gv = (lp.exp() - onehot) / denom;
        }
    }
    Ok(LossGrad {
        loss: total / denom,
        grad,
    })
}

/// Mean Shannon entropy (nats) of the probability rows, and its gradient
/// w.r.t. the logits that produced them through a softmax:
/// `∂H_r/∂z_j = -p_j (ln p_j + H_r)`.
pub fn mean_entropy(probabilities: &Tensor2) -> Result<LossGrad> {
    let (rows, cols) = probabilities.shape();
    let mut grad = Tensor2::zeros(rows, cols);
    let mut total = 0.0;
    for r in 0..rows {
        let p = probabilities.row(r);
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || p.iter().any(|&v| v < 0.0) {
            return Err(Error::Normalization { row: r, sum });
        }
        let h: f64 = -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>();
        total += h;
        let g = grad.row_mut(r);
        for (gv, &pv) in g.iter_mut().zip(p) {
            *gv = if pv > 0.0 { -pv * (pv.ln() + h) / rows as f64 } else { 0.0 };
        }
    }
    let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
    Ok(LossGrad { loss, grad })
}

/// SGD with heavy-ball momentum: `buf ← μ·buf + g; θ ← θ - lr·buf`, then
/// gradients are zeroed. No block is touched if any gradient is non-finite.
pub fn sgd_momentum_step(blocks: &mut [&mut ParamBlock], learning_rates: &[f64], momentum: f64) -> Result<()> {
    if blocks.len() != learning_rates.len() {
        return Err(Error::Usage(format!(
            "{} parameter blocks but {} learning rates",
            blocks.len(),
            learning_rates.len()
        )));
    }
    if let Some(bad) = blocks.iter().find(|b| !b.grad.is_finite()) {
        return Err(Error::Divergence {
            block: bad.name.clone(),
        });
    }
    for (block, &lr) in blocks.iter_mut().zip(learning_rates) {
        let ParamBlock {
            value,
            grad,
            momentum: buffer,
            ..
        } = &mut **block;
        for ((v, g), m) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(buffer.data_mut().iter_mut())
        {
            *m = momentum * *m + *g;
            *v -= lr * *m;
            *g = 0.0;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per block; blocks smaller than this are checked exhaustively.
    pub coords_per_block: usize,
    /// Lower bound on the relative-error denominator, so coordinates where both
    /// gradients are ~0 are compared absolutely.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_block: 24,
            denominator_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_relative_error: f64,
    /// (analytic, numeric) at the worst coordinate.
    pub worst_pair: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient written by `gradient` into each block's
/// `grad` against central differences of `loss`.
pub fn finite_difference_check<P, L, G>(params: &P, loss: L, gradient: G, config: &GradCheckConfig) -> GradCheckReport
where
    P: ParamSet,
    L: Fn(&P) -> f64,
    G: Fn(&mut P),
{
    finite_difference_check_with_probe(params, loss, gradient, |_| Vec::new(), config)
}

/// Like [`finite_difference_check`], but skips any coordinate whose ±step
/// perturbation changes the activation pattern reported by `probe`
/// (i.e. the difference quotient straddles a kink).
pub fn finite_difference_check_with_probe<P, L, G, K>(
    params: &P,
    loss: L,
    gradient: G,
    probe: K,
    config: &GradCheckConfig,
) -> GradCheckReport
where
    P: ParamSet,
    L: Fn(&P) -> f64,
    G: Fn(&mut P),
    K: Fn(&P) -> Vec<bool>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    gradient(&mut analytic);
    let grads: Vec<Tensor2> = analytic.blocks().iter().map(|b| b.grad.clone()).collect();
    let base_pattern = probe(params);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut report = Vec::new();
    for (bi, grad) in grads.iter().enumerate() {
        let len = grad.data().len();
        let coords: Vec<usize> = if len <= config.coords_per_block {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, config.coords_per_block).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = BlockCheck {
            name: work.blocks()[bi].name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_relative_error: 0.0,
            worst_pair: (0.0, 0.0),
        };
        for idx in coords {
            let original = work.blocks()[bi].value.data()[idx];
            work.blocks_mut()[bi].value.data_mut()[idx] = original + config.step;
            let plus = loss(&work);
            let plus_pattern = probe(&work);
            work.blocks_mut()[bi].value.data_mut()[idx] = original - config.step;
            let minus = loss(&work);
            let minus_pattern = probe(&work);
            work.blocks_mut()[bi].value.data_mut()[idx] = original;
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.step);
            let err = relative_error(grad.data()[idx], numeric, config.denominator_floor);
            check.checked += 1;
            if err > check.max_relative_error {
                check.max_relative_error = err;
                check.worst_pair = (grad.data()[idx], numeric);
            }
        }
        report.push(check);
    }
    GradCheckReport { blocks: report }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn block(name: &str, rows: &[&[f64]]) -> ParamBlock {
        ParamBlock::new(name, Tensor2::from_rows(rows).unwrap())
    }

    #[test]
    fn linear_forward_examples() {
        let w = block("w", &[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = block("b", &[&[0.0, 0.0]]);
        let x = Tensor2::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let w = block("w", &[&[0.7, -2.0], &[5.0, 0.1]]);
        let b = block("b", &[&[3.0, -1.0]]);
        let x = Tensor2::zeros(1, 2);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.0, -1.0]);

        let w = block("w", &[&[2.0, 0.0], &[0.0, 3.0]]);
        let b = block("b", &[&[1.0, 1.0]]);
        let x = Tensor2::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_forward_shape_error_names_both_shapes() {
        let w = ParamBlock::new("w", Tensor2::zeros(3, 2));
        let b = ParamBlock::new("b", Tensor2::zeros(1, 2));
        let err = linear_forward(&Tensor2::zeros(1, 2), &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 2)") && msg.contains("(3, 2)"), "{msg}");
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize_rows(&Tensor2::from_rows(&[[3.0, 4.0]]).unwrap(), NORM_EPSILON);
        assert_abs_diff_eq!(out.get(0, 0), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 1), 0.8, epsilon = 1e-15);

        let out = l2_normalize_rows(&Tensor2::zeros(1, 2), NORM_EPSILON);
        assert_eq!(out.data(), &[0.0, 0.0]);

        let out = l2_normalize_rows(&Tensor2::from_rows(&[[1.0, 1.0]]).unwrap(), NORM_EPSILON);
        let r = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(out.get(0, 0), r, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 1), r, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |row: &[f64], label| {
            softmax_cross_entropy(&Tensor2::from_rows(&[row]).unwrap(), &[label], &[true])
                .unwrap()
                .loss
        };
        assert_abs_diff_eq!(ce(&[0.0, 0.0], 0), 2f64.ln(), epsilon = 1e-12);
        assert!(ce(&[100.0, 0.0], 0) < 1e-6);
        let e = std::f64::consts::E;
        let expected = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        assert_abs_diff_eq!(ce(&[1.0, 2.0, 3.0], 2), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.4076, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_mask_and_label_errors() {
        let logits = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let out = softmax_cross_entropy(&logits, &[0, 0], &[false, false]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));

        let out = softmax_cross_entropy(&logits, &[0, 0], &[true, false]).unwrap();
        assert!(out.grad.row(1).iter().all(|&g| g == 0.0));
        let single = softmax_cross_entropy(&logits.select_rows(&[0]), &[0], &[true]).unwrap();
        assert_eq!(out.loss, single.loss);

        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 2], &[true, true]),
            Err(Error::LabelOutOfRange { row: 1, label: 2, .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        let h = |rows: &[&[f64]]| mean_entropy(&Tensor2::from_rows(rows).unwrap()).unwrap().loss;
        assert_abs_diff_eq!(h(&[&[0.25; 4]]), 4f64.ln(), epsilon = 1e-12);
        assert_eq!(h(&[&[0.0, 1.0, 0.0]]), 0.0);
        assert_abs_diff_eq!(h(&[&[1.0, 0.0], &[0.5, 0.5]]), 2f64.ln() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h(&[&[1.0, 0.0], &[0.5, 0.5]]), 0.3466, epsilon = 1e-4);
    }

    #[test]
    fn entropy_rejects_unnormalized_rows() {
        let p = Tensor2::from_rows(&[[0.5, 0.6]]).unwrap();
        assert!(matches!(mean_entropy(&p), Err(Error::Normalization { row: 0, .. })));
    }

    #[test]
    fn sgd_examples() {
        let mut b = ParamBlock::new("theta", Tensor2::filled(1, 1, 1.0));
        b.grad.set(0, 0, 1.0);
        sgd_momentum_step(&mut [&mut b], &[0.1], 0.9).unwrap();
        assert_abs_diff_eq!(b.value.get(0, 0), 0.9, epsilon = 1e-15);
        assert_eq!(b.momentum.get(0, 0), 1.0);
        assert_eq!(b.grad.get(0, 0), 0.0);

        let before = b.value.get(0, 0);
        b.grad.set(0, 0, 1.0);
        sgd_momentum_step(&mut [&mut b], &[0.1], 0.9).unwrap();
        assert_abs_diff_eq!(before - b.value.get(0, 0), 0.1 * 1.9, epsilon = 1e-15);

        let mut fixed = ParamBlock::new("fixed", Tensor2::filled(2, 2, 0.3));
        sgd_momentum_step(&mut [&mut fixed], &[0.1], 0.9).unwrap();
        assert!(fixed.value.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn sgd_divergence_names_block_and_leaves_values() {
        let mut good = ParamBlock::new("good", Tensor2::filled(1, 1, 1.0));
        good.grad.set(0, 0, 1.0);
        let mut bad = ParamBlock::new("bad", Tensor2::filled(1, 1, 1.0));
        bad.grad.set(0, 0, f64::NAN);
        let err = sgd_momentum_step(&mut [&mut good, &mut bad], &[0.1, 0.1], 0.9).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref block } if block == "bad"));
        assert_eq!(good.value.get(0, 0), 1.0);
    }

    #[derive(Clone)]
    struct Scalar(ParamBlock);

    impl ParamSet for Scalar {
        fn blocks(&self) -> Vec<&ParamBlock> {
            vec![&self.0]
        }
        fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let p = Scalar(ParamBlock::new("theta", Tensor2::filled(1, 1, 3.0)));
        let cfg = GradCheckConfig::default();
        let report = finite_difference_check(
            &p,
            |p| 0.5 * p.0.value.get(0, 0).powi(2),
            |p| {
                let v = p.0.value.get(0, 0);
                p.0.grad.set(0, 0, v);
            },
            &cfg,
        );
        assert_eq!(report.checked(), 1);
        assert!(report.worst() < 1e-8, "{report:?}");

        let report = finite_difference_check(&p, |_| 4.2, |_| {}, &cfg);
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn grad_check_skips_kinks() {
        let p = Scalar(ParamBlock::new("theta", Tensor2::filled(1, 1, 1e-7)));
        let report = finite_difference_check_with_probe(
            &p,
            |p| p.0.value.get(0, 0).max(0.0),
            |p| p.0.grad.set(0, 0, 1.0),
            |p| vec![p.0.value.get(0, 0) > 0.0],
            &GradCheckConfig::default(),
        );
        assert_eq!(report.blocks[0].skipped_kinks, 1);
        assert_eq!(report.checked(), 0);
    }

    #[test]
    fn grl_scales_by_negative_lambda() {
        let g = Tensor2::from_rows(&[[1.5, -2.0]]).unwrap();
        let grl = GrlCoefficient::new(0.5).unwrap();
        assert_eq!(grl.backward(&g).data(), &[-0.75, 1.0]);
        assert!(GrlCoefficient::new(-1.0).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Tensor2::from_vec(rows, cols, d).unwrap())
    }

    #[derive(Clone)]
    struct Input(ParamBlock);

    impl ParamSet for Input {
        fn blocks(&self) -> Vec<&ParamBlock> {
            vec![&self.0]
        }
        fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
            vec![&mut self.0]
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(t in matrix(4, 5)) {
            let p = softmax_rows(&t.scaled(20.0));
            for row in p.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn entropy_within_bounds(t in matrix(3, 6)) {
            let h = mean_entropy(&softmax_rows(&t)).unwrap().loss;
            prop_assert!(h >= 0.0 && h <= 6f64.ln() + 1e-12);
        }

        #[test]
        fn kernel_gradients_match_differences(t in matrix(3, 4), w in matrix(4, 3), seed in 0u64..1000) {
            // cross-entropy(softmax(normalize(x)·W / T)) w.r.t. x
            prop_assume!(t.iter_rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.01));
            let labels = [0usize, 2, 1];
            let temp = 0.2;
            let loss_of = |x: &Tensor2| {
                let u = l2_normalize_rows(x, NORM_EPSILON);
                let s = u.matmul(&w).unwrap().scaled(1.0 / temp);
                let ce = softmax_cross_entropy(&s, &labels, &[true; 3]).unwrap().loss;
                let h = mean_entropy(&softmax_rows(&s)).unwrap().loss;
                ce + 0.3 * h
            };
            let p = Input(ParamBlock::new("x", t));
            let report = finite_difference_check(
                &p,
                |p| loss_of(&p.0.value),
                |p| {
                    let x = p.0.value.clone();
                    let u = l2_normalize_rows(&x, NORM_EPSILON);
                    let s = u.matmul(&w).unwrap().scaled(1.0 / temp);
                    let mut gs = softmax_cross_entropy(&s, &labels, &[true; 3]).unwrap().grad;
                    gs.add_scaled(&mean_entropy(&softmax_rows(&s)).unwrap().grad, 0.3).unwrap();
                    let gu = gs.matmul_nt(&w).unwrap().scaled(1.0 / temp);
                    p.0.grad = l2_normalize_rows_backward(&x, &gu, NORM_EPSILON).unwrap();
                },
                &GradCheckConfig { seed, ..GradCheckConfig::default() },
            );
            prop_assert!(report.worst() < 1e-4, "{:?}", report);
        }
    }
}
