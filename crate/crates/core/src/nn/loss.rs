use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to the true-class probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `labels` under the row distributions
/// `probs`, and its gradient with respect to the pre-softmax logits,
/// `(probs − onehot) / M`.
///
/// A true-class probability of exactly zero is clamped to [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let m = probs.rows();
    let classes = probs.cols();
    if labels.len() != m {
        return Err(Error::Dimension(format!(
            "{m} probability rows but {} labels",
            labels.len()
        )));
    }
    if m == 0 {
        return Ok((0.0, probs.clone()));
    }
    let scale = 1.0 / m as f64;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Argument(format!("label {y} outside [0, {classes})")));
        }
        let row = grad.row_mut(i);
        loss -= row[y].max(PROB_FLOOR).ln();
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss * scale, grad))
}

/// Mean squared Euclidean distance between matching rows,
/// `(1/N) Σ ||z1_i − z2_i||²`, and the gradients with respect to each argument.
pub fn consistency_loss(z1: &Tensor, z2: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    z1.same_shape(z2, "consistency_loss")?;
    let n = z1.rows();
    if n == 0 {
        return Ok((0.0, z1.clone(), z2.clone()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut g1 = Vec::with_capacity(z1.len());
    for (a, b) in z1.data().iter().zip(z2.data()) {
        let diff = a - b;
        loss += diff * diff;
        g1.push(2.0 * inv_n * diff);
    }
    let g2 = g1.iter().map(|g| -g).collect();
    let shape = z1.shape().to_vec();
    Ok((
        loss * inv_n,
        Tensor::new(shape.clone(), g1)?,
        Tensor::new(shape, g2)?,
    ))
}

/// Components of the combined semi-supervised objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    /// `supervised + alpha * unsupervised`.
    pub total: f64,
    pub alpha: f64,
    /// Labeled examples in the batch.
    pub labeled: usize,
    pub batch_size: usize,
}

impl LossBreakdown {
    pub fn new(supervised: f64, unsupervised: f64, alpha: f64, labeled: usize, batch_size: usize) -> Self {
        LossBreakdown {
            supervised,
            unsupervised,
            total: supervised + alpha * unsupervised,
            alpha,
            labeled,
            batch_size,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.supervised.is_finite() && self.unsupervised.is_finite() && self.total.is_finite()
    }
}
