//! The privacy boundary of a distillation run.
//!
//! Teacher outputs are only ever read inside a [`PrivateGradientOracle`]. The
//! training loop receives the sanitized gradient and nothing else that
//! influences the student or generator; the diagnostics are logged only.

use super::losses::{distillation_loss, DistillLossConfig};
use crate::dpmech::{sanitize_batch, MechanismConfig, NoiseSource};
use crate::error::{Error, Result};
use crate::nnkit::MlpModel;
use crate::tensor::{l2_norm, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum SanitizedGradient {
    /// One vector for the whole batch, averaged over `B` examples.
    Shared(Vec<f64>),
    /// One vector per example, averaged over teachers.
    PerExample(Tensor),
}

/// Non-private quantities reported for monitoring only.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueryDiagnostics {
    /// Batch-mean `L_T`.
    pub teacher_loss: f64,
    /// `‖(1/B) Σᵢ gᵢ‖₂` of the raw, unbounded output gradients.
    pub raw_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    pub sanitized: SanitizedGradient,
    pub diagnostics: QueryDiagnostics,
}

pub trait PrivateGradientOracle {
    /// Sanitized gradient of `L_T` with respect to the student outputs on
    /// `synthetic`.
    fn query(&mut self, synthetic: &Tensor, student_logits: &Tensor) -> Result<OracleResponse>;
}

fn mean_row_norm(grads: &Tensor) -> f64 {
    let k = grads.cols();
    let b = grads.rows() as f64;
    let mut mean = vec![0.0; k];
    for r in grads.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / b;
        }
    }
    l2_norm(&mean)
}

/// Single teacher; noise added once to the batch sum.
pub struct TeacherOracle<'a> {
    teacher: &'a MlpModel,
    mechanism: MechanismConfig,
    loss: DistillLossConfig,
    noise: NoiseSource,
}

impl<'a> TeacherOracle<'a> {
    pub fn new(
        teacher: &'a MlpModel,
        mechanism: MechanismConfig,
        loss: DistillLossConfig,
        noise: NoiseSource,
    ) -> Self {
        TeacherOracle {
            teacher,
            mechanism,
            loss,
            noise,
        }
    }
}

impl PrivateGradientOracle for TeacherOracle<'_> {
    fn query(&mut self, synthetic: &Tensor, student_logits: &Tensor) -> Result<OracleResponse> {
        let teacher = self.teacher.forward(synthetic)?;
        let (teacher_loss, grads) = distillation_loss(teacher.logits(), student_logits, &self.loss)?;
        let rows: Vec<&[f64]> = grads.iter_rows().collect();
        let sanitized = sanitize_batch(&rows, &self.mechanism, &mut self.noise)?;
        Ok(OracleResponse {
            sanitized: SanitizedGradient::Shared(sanitized),
            diagnostics: QueryDiagnostics {
                teacher_loss,
                raw_grad_norm: mean_row_norm(&grads),
            },
        })
    }
}

/// Several teachers; each example's gradients are bounded per teacher, summed,
/// noised once, and divided by the teacher count.
pub struct EnsembleOracle<'a> {
    teachers: &'a [MlpModel],
    mechanism: MechanismConfig,
    loss: DistillLossConfig,
    noise: NoiseSource,
}

impl<'a> EnsembleOracle<'a> {
    pub fn new(
        teachers: &'a [MlpModel],
        mechanism: MechanismConfig,
        loss: DistillLossConfig,
        noise: NoiseSource,
    ) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::invalid("ensemble needs at least one teacher"));
        }
        Ok(EnsembleOracle {
            teachers,
            mechanism,
            loss,
            noise,
        })
    }
}

impl PrivateGradientOracle for EnsembleOracle<'_> {
    fn query(&mut self, synthetic: &Tensor, student_logits: &Tensor) -> Result<OracleResponse> {
        let per_teacher = self
            .teachers
            .iter()
            .map(|t| {
                let trace = t.forward(synthetic)?;
                distillation_loss(trace.logits(), student_logits, &self.loss)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.teachers.len() as f64;
        let (b, k) = (student_logits.rows(), student_logits.cols());
        let mut out = Vec::with_capacity(b * k);
        let mut mean_raw = vec![0.0; k];
        for i in 0..b {
            let grads: Vec<&[f64]> = per_teacher.iter().map(|(_, g)| g.row(i)).collect();
            for g in &grads {
                for (m, v) in mean_raw.iter_mut().zip(g.iter()) {
                    *m += v / (n * b as f64);
                }
            }
            out.extend(sanitize_batch(&grads, &self.mechanism, &mut self.noise)?);
        }
        Ok(OracleResponse {
            sanitized: SanitizedGradient::PerExample(Tensor::from_parts(vec![b, k], out)),
            diagnostics: QueryDiagnostics {
                teacher_loss: per_teacher.iter().map(|(l, _)| l).sum::<f64>() / n,
                raw_grad_norm: l2_norm(&mean_raw),
            },
        })
    }
}

/// Replays a fixed sequence of sanitized gradients, one per call.
pub struct ReplayOracle {
    responses: std::vec::IntoIter<SanitizedGradient>,
}

impl ReplayOracle {
    pub fn new(responses: Vec<SanitizedGradient>) -> Self {
        ReplayOracle {
            responses: responses.into_iter(),
        }
    }
}

impl PrivateGradientOracle for ReplayOracle {
    fn query(&mut self, _synthetic: &Tensor, _student_logits: &Tensor) -> Result<OracleResponse> {
        let sanitized = self
            .responses
            .next()
            .ok_or_else(|| Error::invalid("replay oracle ran out of responses"))?;
        Ok(OracleResponse {
            sanitized,
            diagnostics: QueryDiagnostics::default(),
        })
    }
}

/// Wraps an oracle and keeps a copy of every sanitized answer.
pub struct RecordingOracle<O> {
    inner: O,
    pub recorded: Vec<SanitizedGradient>,
}

impl<O> RecordingOracle<O> {
    pub fn new(inner: O) -> Self {
        RecordingOracle {
            inner,
            recorded: Vec::new(),
        }
    }
}

impl<O: PrivateGradientOracle> PrivateGradientOracle for RecordingOracle<O> {
    fn query(&mut self, synthetic: &Tensor, student_logits: &Tensor) -> Result<OracleResponse> {
        let r = self.inner.query(synthetic, student_logits)?;
        self.recorded.push(r.sanitized.clone());
        Ok(r)
    }
}
