use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Tensor};

const TARGET_SUM_TOLERANCE: f64 = 1e-6;

/// Mean soft-target cross entropy and its gradient with respect to the logits.
///
/// `loss = −(1/B) Σᵢ Σ_c target_ic · log softmax(logits_i)_c`,
/// `grad = (softmax(logits) − target) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, target_probs: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::dim("logits must be a [batch × classes] matrix"));
    }
    target_probs.ensure_shape(logits.shape(), "target probabilities")?;
    for (i, row) in target_probs.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > TARGET_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "target row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    let b = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, t) in logits.iter_rows().zip(target_probs.iter_rows()) {
        let lse = log_sum_exp(z);
        loss -= z
            .iter()
            .zip(t)
            .filter(|(_, &tc)| tc > 0.0)
            .map(|(&zc, &tc)| tc * (zc - lse))
            .sum::<f64>();
        let p = softmax(z);
        grad.extend(p.iter().zip(t).map(|(pc, tc)| (pc - tc) / b));
    }
    Ok((loss / b, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

/// Row-wise one-hot encoding.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} outside 0..{classes}")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let data = logits.iter_rows().flat_map(softmax).collect();
    Tensor::from_parts(logits.shape().to_vec(), data)
}
