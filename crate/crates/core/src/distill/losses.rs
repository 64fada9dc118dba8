//! Losses for the teacher→student query (`L_T`), the student fit to the
//! private target (`L_S`), and the generator objective (`L_G`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{softmax_cross_entropy, softmax_rows};
use crate::tensor::{argmax, log_sum_exp, softmax, Tensor};

/// Distillation loss settings.
///
/// `L_T = CE(student, argmax teacher) + τ·temp²·KL(p_t ‖ p_s)` where `p_·` is
/// the temperature-softened softmax. This stands in for a decoupled KD loss;
/// the gradient path and the sanitized surface are the same.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillLossConfig {
    /// `τ`
    pub kd_weight: f64,
    pub temperature: f64,
}

impl Default for DistillLossConfig {
    fn default() -> Self {
        DistillLossConfig {
            kd_weight: 1.0,
            temperature: 4.0,
        }
    }
}

/// Batch-mean distillation loss plus each example's own gradient with respect
/// to its student logit row (rows of the returned matrix, not divided by B).
pub fn distillation_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    cfg: &DistillLossConfig,
) -> Result<(f64, Tensor)> {
    if student_logits.shape().len() != 2 {
        return Err(Error::dim("student logits must be a [batch × classes] matrix"));
    }
    teacher_logits.ensure_shape(student_logits.shape(), "teacher logits")?;
    if !(cfg.temperature > 0.0) || !(cfg.kd_weight >= 0.0) {
        return Err(Error::invalid("distillation needs temperature > 0 and τ >= 0"));
    }
    let temp = cfg.temperature;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student_logits.len());
    for (t, s) in teacher_logits.iter_rows().zip(student_logits.iter_rows()) {
        let y = argmax(t);
        let p = softmax(s);
        total += log_sum_exp(s) - s[y];
        let mut g: Vec<f64> = p.clone();
        g[y] -= 1.0;
        if cfg.kd_weight > 0.0 {
            let ts: Vec<f64> = t.iter().map(|v| v / temp).collect();
            let ss: Vec<f64> = s.iter().map(|v| v / temp).collect();
            let (lt, ls) = (log_sum_exp(&ts), log_sum_exp(&ss));
            let pt = softmax(&ts);
            let ps = softmax(&ss);
            let kl: f64 = pt
                .iter()
                .zip(ts.iter().zip(&ss))
                .filter(|(&q, _)| q > 0.0)
                .map(|(&q, (&a, &b))| q * ((a - lt) - (b - ls)))
                .sum();
            total += cfg.kd_weight * temp * temp * kl;
            for (gc, (qs, qt)) in g.iter_mut().zip(ps.iter().zip(&pt)) {
                *gc += cfg.kd_weight * temp * (qs - qt);
            }
        }
        grads.extend(g);
    }
    let b = student_logits.rows() as f64;
    Ok((total / b, Tensor::from_parts(student_logits.shape().to_vec(), grads)))
}

/// `y_s = logits − γ·g̃`, with the single sanitized vector applied to every row.
pub fn dp_target(student_logits: &Tensor, sanitized: &[f64], gamma: f64) -> Result<Tensor> {
    if sanitized.len() != student_logits.cols() {
        return Err(Error::dim(format!(
            "sanitized gradient has length {}, logits have {} classes",
            sanitized.len(),
            student_logits.cols()
        )));
    }
    let mut out = student_logits.clone();
    for r in 0..out.rows() {
        for (v, g) in out.row_mut(r).iter_mut().zip(sanitized) {
            *v -= gamma * g;
        }
    }
    Ok(out)
}

/// Row-wise `y_s^i = logits_i − γ·g̃_i` for per-example sanitized gradients.
pub fn dp_target_rows(student_logits: &Tensor, sanitized: &Tensor, gamma: f64) -> Result<Tensor> {
    sanitized.ensure_shape(student_logits.shape(), "per-example sanitized gradients")?;
    let data = student_logits
        .data()
        .iter()
        .zip(sanitized.data())
        .map(|(s, g)| s - gamma * g)
        .collect();
    Ok(Tensor::from_parts(student_logits.shape().to_vec(), data))
}

/// Mean cross entropy of the student against the fixed soft target
/// `softmax(y_s)`; the gradient is taken with respect to the student only.
pub fn student_loss(student_logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    target.ensure_shape(student_logits.shape(), "private target")?;
    softmax_cross_entropy(student_logits, &softmax_rows(target))
}

/// Sign applied to the feature-norm term of `L_G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTermSign {
    /// `−β·mean‖f‖`: minimizing the loss raises activation magnitude.
    #[default]
    Reward,
    /// `+β·mean‖f‖`, as the formula is printed.
    Penalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorLossWeights {
    /// Weight of the self-label cross entropy term (0 or 1 in ablations).
    pub ce: f64,
    /// `α`, weight of the class-balance term.
    pub alpha: f64,
    /// `β`, weight of the activation-norm term.
    pub beta: f64,
    pub feature_sign: FeatureTermSign,
}

impl Default for GeneratorLossWeights {
    fn default() -> Self {
        GeneratorLossWeights {
            ce: 1.0,
            alpha: 1.0,
            beta: 1.0,
            feature_sign: FeatureTermSign::Reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLoss {
    pub loss: f64,
    /// Unweighted-by-total values of the three terms (already multiplied by
    /// their own weights).
    pub terms: [f64; 3],
    pub logit_grad: Tensor,
    pub feature_grad: Tensor,
}

/// `L_G = ce·CE(s, argmax s) + α·Σ_c p̄_c log p̄_c ± β·mean‖f‖₂`, where `p̄` is
/// the batch-mean softmax and `f` the student backbone features.
pub fn generator_loss(
    student_logits: &Tensor,
    features: &Tensor,
    w: &GeneratorLossWeights,
) -> Result<GeneratorLoss> {
    if student_logits.shape().len() != 2 || features.shape().len() != 2 {
        return Err(Error::dim("generator loss expects matrices"));
    }
    if features.rows() != student_logits.rows() {
        return Err(Error::dim("features and logits disagree on batch size"));
    }
    if student_logits.rows() == 0 {
        return Err(Error::invalid("generator loss on an empty batch"));
    }
    if !(w.ce >= 0.0 && w.alpha >= 0.0 && w.beta >= 0.0) {
        return Err(Error::invalid("generator loss weights must be >= 0"));
    }
    let b = student_logits.rows() as f64;
    let k = student_logits.cols();
    let probs: Vec<Vec<f64>> = student_logits.iter_rows().map(softmax).collect();

    let mut logit_grad = vec![0.0; student_logits.len()];

    // Self-label cross entropy.
    let mut ce = 0.0;
    for (i, (s, p)) in student_logits.iter_rows().zip(&probs).enumerate() {
        let y = argmax(s);
        ce += log_sum_exp(s) - s[y];
        let g = &mut logit_grad[i * k..(i + 1) * k];
        for (gc, pc) in g.iter_mut().zip(p) {
            *gc += w.ce * pc / b;
        }
        g[y] -= w.ce / b;
    }
    let term1 = w.ce * ce / b;

    // Negative entropy of the batch-mean prediction.
    let mut mean = vec![0.0; k];
    for p in &probs {
        for (m, pc) in mean.iter_mut().zip(p) {
            *m += pc / b;
        }
    }
    let log_mean: Vec<f64> = mean.iter().map(|&m| m.max(f64::MIN_POSITIVE).ln()).collect();
    let term2 = w.alpha
        * mean
            .iter()
            .zip(&log_mean)
            .map(|(&m, &l)| if m > 0.0 { m * l } else { 0.0 })
            .sum::<f64>();
    if w.alpha > 0.0 {
        for (i, p) in probs.iter().enumerate() {
            let centered: f64 = p.iter().zip(&log_mean).map(|(pc, l)| pc * l).sum();
            let g = &mut logit_grad[i * k..(i + 1) * k];
            for ((gc, pc), l) in g.iter_mut().zip(p).zip(&log_mean) {
                *gc += w.alpha / b * pc * (l - centered);
            }
        }
    }

    // Activation magnitude of the backbone features.
    let sign = match w.feature_sign {
        FeatureTermSign::Reward => -1.0,
        FeatureTermSign::Penalize => 1.0,
    };
    let mut norm_sum = 0.0;
    let mut feature_grad = vec![0.0; features.len()];
    let fc = features.cols();
    for (i, f) in features.iter_rows().enumerate() {
        let n = crate::tensor::l2_norm(f);
        norm_sum += n;
        if n > 0.0 && w.beta > 0.0 {
            for (g, v) in feature_grad[i * fc..(i + 1) * fc].iter_mut().zip(f) {
                *g = sign * w.beta * v / (n * b);
            }
        }
    }
    let term3 = sign * w.beta * norm_sum / b;

    let loss = term1 + term2 + term3;
    if !loss.is_finite() {
        return Err(Error::Numerical("generator loss is not finite".into()));
    }
    Ok(GeneratorLoss {
        loss,
        terms: [term1, term2, term3],
        logit_grad: Tensor::from_parts(student_logits.shape().to_vec(), logit_grad),
        feature_grad: Tensor::from_parts(features.shape().to_vec(), feature_grad),
    })
}

/// Entropy (nats) of the batch-mean softmax.
pub fn mean_prediction_entropy(logits: &Tensor) -> f64 {
    let k = logits.cols();
    let b = logits.rows() as f64;
    let mut mean = vec![0.0; k];
    for p in logits.iter_rows().map(softmax) {
        for (m, pc) in mean.iter_mut().zip(p) {
            *m += pc / b;
        }
    }
    -mean.iter().filter(|&&m| m > 0.0).map(|m| m * m.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::one_hot;

    fn m(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    const NO_KD: DistillLossConfig = DistillLossConfig {
        kd_weight: 0.0,
        temperature: 4.0,
    };

    #[test]
    fn self_distillation_gradient_is_softmax_minus_argmax() {
        let s = m(2, 3, vec![0.2, 1.0, -0.5, 3.0, 0.0, 0.1]);
        let (loss, g) = distillation_loss(&s, &s, &NO_KD).unwrap();
        let (ce, _) = softmax_cross_entropy(&s, &one_hot(&[1, 0], 3).unwrap()).unwrap();
        assert!((loss - ce).abs() < 1e-15);
        for (i, y) in [1usize, 0].into_iter().enumerate() {
            let mut want = softmax(s.row(i));
            want[y] -= 1.0;
            assert_eq!(g.row(i), want.as_slice());
        }
    }

    #[test]
    fn confident_disagreement() {
        let (_, g) = distillation_loss(&m(1, 2, vec![10., 0.]), &m(1, 2, vec![0., 10.]), &NO_KD).unwrap();
        // softmax([0,10]) − (1,0)
        let p1 = 1.0 / (1.0 + (-10f64).exp());
        assert!((g.row(0)[0] + p1).abs() < 1e-15);
        assert!((g.row(0)[1] - p1).abs() < 1e-15);
        assert!((p1 - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn kd_term_vanishes_when_logits_match() {
        let s = m(1, 3, vec![0.5, -0.5, 2.0]);
        let (with, gw) = distillation_loss(&s, &s, &DistillLossConfig::default()).unwrap();
        let (without, gwo) = distillation_loss(&s, &s, &NO_KD).unwrap();
        assert!((with - without).abs() < 1e-14);
        for (a, b) in gw.data().iter().zip(gwo.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dp_target_arithmetic() {
        let s = m(1, 2, vec![1., 2.]);
        assert_eq!(dp_target(&s, &[1., 1.], 0.5).unwrap().data(), &[0.5, 1.5]);
        assert_eq!(dp_target(&s, &[1., 1.], 0.0).unwrap(), s);
        assert!(matches!(dp_target(&s, &[1.], 0.5), Err(Error::Dimension(_))));
        let two = m(2, 2, vec![1., 2., 3., 4.]);
        assert_eq!(dp_target(&two, &[1., -1.], 1.0).unwrap().data(), &[0., 3., 2., 5.]);
    }

    #[test]
    fn student_loss_fixed_point_and_hard_limit() {
        let s = m(2, 3, vec![0.1, 0.2, 0.3, -1.0, 2.0, 0.0]);
        let (_, g) = student_loss(&s, &s).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-16));
        let hard = m(2, 3, vec![800., 0., 0., 0., 0., 800.]);
        let (l1, g1) = student_loss(&s, &hard).unwrap();
        let (l2, g2) = softmax_cross_entropy(&s, &one_hot(&[0, 2], 3).unwrap()).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_mean_prediction_minimizes_balance_term() {
        // Two confident rows on different classes: batch mean is uniform.
        let s = m(2, 2, vec![50., -50., -50., 50.]);
        let f = m(2, 1, vec![0., 0.]);
        let w = GeneratorLossWeights {
            ce: 0.0,
            alpha: 1.0,
            beta: 1.0,
            ..Default::default()
        };
        let out = generator_loss(&s, &f, &w).unwrap();
        assert!((out.terms[1] + 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.terms[2], 0.0);
        assert!(out.feature_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_sign_flag() {
        let s = m(1, 2, vec![0., 0.]);
        let f = m(1, 2, vec![3., 4.]);
        let reward = generator_loss(&s, &f, &GeneratorLossWeights::default()).unwrap();
        assert!((reward.terms[2] + 5.0).abs() < 1e-15);
        let penal = generator_loss(
            &s,
            &f,
            &GeneratorLossWeights {
                feature_sign: FeatureTermSign::Penalize,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((penal.terms[2] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_mean_prediction() {
        assert!((mean_prediction_entropy(&m(1, 4, vec![0.; 4])) - 4f64.ln()).abs() < 1e-15);
        assert!(mean_prediction_entropy(&m(2, 2, vec![900., 0., 900., 0.])) < 1e-12);
    }
}
