use std::path::Path;

use serde::Serialize;

use crate::accountant::EpsilonEstimate;
use crate::error::{Error, Result};
use crate::nnkit::MlpModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// `L_T` (for direct training: cross entropy on the private batch).
    pub teacher_loss: f64,
    /// `L_S` before the student step.
    pub student_loss: f64,
    /// `L_G`; absent when there is no generator.
    pub generator_loss: Option<f64>,
    /// Held-out student accuracy, when evaluated at this iteration.
    pub accuracy: Option<f64>,
    /// ε spent after this iteration. Serialized as `null` when unbounded.
    pub eps_spent: f64,
    /// Pre-noise batch-mean gradient norm.
    pub grad_norm: f64,
    pub gradnorm_runmin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub algorithm: String,
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub queries_composed: u64,
    pub epsilon: EpsilonEstimate,
    pub delta: f64,
    pub epsilon_budget: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Entropy (nats) of the student's batch-mean prediction on fresh
    /// generator samples after training.
    pub class_balance_entropy: Option<f64>,
    /// `γ` as applied, after the schedule.
    pub gamma: f64,
    pub norm_bound: f64,
    pub noise_scale: f64,
    pub classes: usize,
    #[serde(skip)]
    pub student: MlpModel,
    #[serde(skip)]
    pub generator: Option<MlpModel>,
}

impl TrainReport {
    pub fn iterations_run(&self) -> usize {
        self.records.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per iteration: `iter,L_T,L_S,L_G,acc,eps_spent,gradnorm_runmin`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iter", "L_T", "L_S", "L_G", "acc", "eps_spent", "gradnorm_runmin"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                format!("{:?}", r.teacher_loss),
                format!("{:?}", r.student_loss),
                opt(r.generator_loss),
                opt(r.accuracy),
                format!("{:?}", r.eps_spent),
                format!("{:?}", r.gradnorm_runmin),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nnkit::{MlpModel, ModelSpec};
    use rand::SeedableRng;

    pub(crate) fn report_with_norms(norms: &[f64]) -> TrainReport {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = f64::INFINITY;
        let records = norms
            .iter()
            .enumerate()
            .map(|(iter, &g)| {
                m = m.min(g);
                IterationRecord {
                    iter,
                    teacher_loss: 1.0,
                    student_loss: 0.5,
                    generator_loss: if iter == 0 { None } else { Some(-0.25) },
                    accuracy: if iter == 0 { Some(0.5) } else { None },
                    eps_spent: 0.1 * iter as f64,
                    grad_norm: g,
                    gradnorm_runmin: m,
                }
            })
            .collect();
        TrainReport {
            algorithm: "test".into(),
            records,
            stop_reason: StopReason::Completed,
            queries_composed: norms.len() as u64,
            epsilon: EpsilonEstimate::ZERO,
            delta: 1e-5,
            epsilon_budget: None,
            final_accuracy: Some(0.5),
            class_balance_entropy: None,
            gamma: 1.0,
            norm_bound: 1.0,
            noise_scale: 0.0,
            classes: 3,
            student: MlpModel::init(&ModelSpec::student(2, 3), &mut rng).unwrap(),
            generator: None,
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report_with_norms(&[2.0, 1.0]).to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,L_T,L_S,L_G,acc,eps_spent,gradnorm_runmin");
        assert_eq!(lines[1], "0,1.0,0.5,,0.5,0.0,2.0");
        assert_eq!(lines[2], "1,1.0,0.5,-0.25,,0.1,1.0");
    }

    #[test]
    fn json_skips_models_and_names_stop_reason() {
        let json = report_with_norms(&[1.0]).to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["stop_reason"], "completed");
        assert!(v.get("student").is_none());
        assert_eq!(v["records"].as_array().unwrap().len(), 1);
    }
}
