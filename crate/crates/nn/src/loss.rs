use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Scalar loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability of class 1 for a two-logit head: the logistic of the logit
/// difference.
pub fn two_class_probability(background: f64, foreground: f64) -> f64 {
    1.0 / (1.0 + (background - foreground).exp())
}

/// `-log softmax(logits)[label]`; gradient is `softmax - one_hot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<LossOutput> {
    let k = logits.len();
    if label >= k {
        return Err(NnError::LabelOutOfRange { label, classes: k });
    }
    let x = logits.values();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = x.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - x[label];
    let mut grad = softmax(x);
    grad[label] -= 1.0;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("softmax_cross_entropy".into()));
    }
    Ok(LossOutput {
        loss,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Elementwise Huber-style loss with unit transition, summed.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<LossOutput> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "smooth_l1: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut loss = 0.0;
    let grad = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d
            } else {
                loss += d.abs() - 0.5;
                d.signum()
            }
        })
        .collect();
    Ok(LossOutput {
        loss,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}
