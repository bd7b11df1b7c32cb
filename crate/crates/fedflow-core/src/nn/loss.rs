//! Mean-squared-error and cross-entropy losses with their gradients.

use super::tensor::Tensor;
use super::{softmax_rows, NnError};
use num_traits::Float;

/// Mean over all elements of the squared difference.
pub fn mse<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F, NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = F::from(pred.numel()).unwrap();
    let mut acc = F::zero();
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = *p - *t;
        acc = acc + d * d;
    }
    let loss = acc / n;
    if !loss.is_finite() {
        return Err(NnError::Numeric("non-finite mse loss".into()));
    }
    Ok(loss)
}

/// d(mse)/d(pred) = 2 (pred - target) / numel.
pub fn mse_grad<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch("mse_grad shapes differ".into()));
    }
    let scale = F::from(2.0).unwrap() / F::from(pred.numel()).unwrap();
    let mut out = pred.clone();
    for (o, t) in out.data_mut().iter_mut().zip(target.data()) {
        *o = (*o - *t) * scale;
    }
    Ok(out)
}

/// Batch-mean negative log softmax probability of the true class, computed
/// from logits `[B, N]` with log-sum-exp stabilization.
pub fn cross_entropy<F: Float>(logits: &Tensor<F>, labels: &[usize]) -> Result<F, NnError> {
    let (batch, width) = ce_dims(logits, labels)?;
    let mut acc = F::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * width..(r + 1) * width];
        let max = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        let sum_exp = row.iter().fold(F::zero(), |a, &v| a + (v - max).exp());
        acc = acc + (max + sum_exp.ln() - row[label]);
    }
    let loss = acc / F::from(batch).unwrap();
    if !loss.is_finite() {
        return Err(NnError::Numeric("non-finite cross-entropy loss".into()));
    }
    Ok(loss)
}

/// d(cross-entropy)/d(logits) = (softmax(logits) - onehot) / batch.
pub fn cross_entropy_grad<F: Float>(
    logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>, NnError> {
    let (batch, width) = ce_dims(logits, labels)?;
    let mut out = logits.clone();
    softmax_rows(out.data_mut(), batch, width);
    let inv_b = F::one() / F::from(batch).unwrap();
    for (r, &label) in labels.iter().enumerate() {
        let row = &mut out.data_mut()[r * width..(r + 1) * width];
        row[label] = row[label] - F::one();
        for v in row.iter_mut() {
            *v = *v * inv_b;
        }
    }
    Ok(out)
}

fn ce_dims<F: Float>(logits: &Tensor<F>, labels: &[usize]) -> Result<(usize, usize), NnError> {
    if logits.shape().len() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "cross-entropy expects [batch, classes] logits, got {:?}",
            logits.shape()
        )));
    }
    let (batch, width) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(NnError::Index(format!(
            "label {bad} out of range for {width} classes"
        )));
    }
    Ok((batch, width))
}
