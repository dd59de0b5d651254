//! Batch-mean losses over logits. Values are computed in `f64`; gradients are
//! returned in the logits' precision.

use super::model::ClassRange;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<F> {
    pub loss: f64,
    /// dLoss/dLogits, same shape as the logits.
    pub grad: Tensor<F>,
}

fn check_logits<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "logits must be [B, C], got {:?}",
            logits.shape()
        )));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    Ok((b, c))
}

/// Softmax cross-entropy where only the columns in `range` take part; columns
/// outside it get an exactly-zero gradient.
pub fn range_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    range: ClassRange,
) -> Result<LossOutput<F>> {
    let (b, c) = check_logits(logits, labels)?;
    if range.is_empty() || range.end > c {
        return Err(Error::Argument(format!(
            "class range {}..{} invalid for {c} classes",
            range.start, range.end
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| !range.contains(y)) {
        return Err(Error::Argument(format!(
            "label {bad} outside class range {}..{}",
            range.start, range.end
        )));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = vec![F::zero(); b * c];
    let mut total = 0.0;
    let mut probs = vec![0.0f64; range.len()];
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.row(r)[range.start..range.end];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - max).exp();
            z += *p;
        }
        let log_z = z.ln() + max;
        total += log_z - row[y - range.start].as_f64();
        let g = &mut grad[r * c + range.start..r * c + range.end];
        for (j, (gj, p)) in g.iter_mut().zip(&probs).enumerate() {
            let onehot = if j + range.start == y { 1.0 } else { 0.0 };
            *gj = F::of((p / z - onehot) * inv_b);
        }
    }
    Ok(LossOutput {
        loss: total * inv_b,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Full-head softmax cross-entropy over all `C` classes.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<LossOutput<F>> {
    let (_, c) = check_logits(logits, labels)?;
    range_cross_entropy(logits, labels, ClassRange::new(0, c)?)
}

/// Cross-entropy restricted to the current task's classes.
pub fn single_head_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    class_range: ClassRange,
) -> Result<LossOutput<F>> {
    range_cross_entropy(logits, labels, class_range)
}

/// Mean squared error over every element, `mean((logits - targets)^2)`.
pub fn mse<F: Scalar>(logits: &Tensor<F>, targets: &Tensor<F>) -> Result<LossOutput<F>> {
    if logits.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "mse shapes differ: {:?} vs {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, t)| {
            let d = a.as_f64() - t.as_f64();
            total += d * d;
            F::of(2.0 * d / n)
        })
        .collect();
    Ok(LossOutput {
        loss: total / n,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Index of the largest logit within `range` for one row; ties go to the lowest index.
pub fn argmax_in<F: Scalar>(row: &[F], range: ClassRange) -> usize {
    let mut best = range.start;
    for j in range.start + 1..range.end {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}
