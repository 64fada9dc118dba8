use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::config::DpConfig;
use super::losses::{dp_target, dp_target_rows, generator_loss, mean_prediction_entropy, student_loss};
use super::oracle::{
    EnsembleOracle, OracleResponse, PrivateGradientOracle, SanitizedGradient, TeacherOracle,
};
use super::report::{IterationRecord, StopReason, TrainReport};
use crate::accountant::{LambdaGrid, PrivacyLedger};
use crate::datasets::LabeledDataset;
use crate::dpmech::{sanitize_batch, NoiseSource};
use crate::error::{Error, Result};
use crate::nnkit::{backward, backward_with_features, one_hot, sgd_step, softmax_cross_entropy, MlpModel};
use crate::tensor::{l2_norm, softmax, Tensor};

/// Offset separating the mechanism's noise stream from the sampling stream.
const NOISE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const PROBE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

/// Seed of the [`NoiseSource`] used by a run seeded with `seed`.
pub fn noise_seed(seed: u64) -> u64 {
    seed.wrapping_add(NOISE_STREAM)
}

/// Teachers of a multi-model run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    teachers: Vec<MlpModel>,
}

impl EnsembleSpec {
    pub fn new(teachers: Vec<MlpModel>) -> Result<Self> {
        let first = teachers
            .first()
            .ok_or_else(|| Error::invalid("ensemble needs at least one teacher"))?;
        if let Some(t) = teachers
            .iter()
            .find(|t| t.output_dim() != first.output_dim() || t.input_dim() != first.input_dim())
        {
            return Err(Error::dim(format!(
                "teachers disagree on shape: {}→{} vs {}→{}",
                first.input_dim(),
                first.output_dim(),
                t.input_dim(),
                t.output_dim()
            )));
        }
        Ok(EnsembleSpec { teachers })
    }

    pub fn teachers(&self) -> &[MlpModel] {
        &self.teachers
    }
}

fn ledger_for(cfg: &DpConfig, classes: usize) -> Result<PrivacyLedger> {
    PrivacyLedger::new(
        cfg.mechanism.norm_bound,
        classes as u64,
        cfg.mechanism.noise_scale,
        cfg.delta,
        cfg.accounting,
        LambdaGrid::standard(),
    )
}

/// Refuses to start when even one iteration would overrun the budget.
fn precheck_budget(ledger: &PrivacyLedger, cfg: &DpConfig) -> Result<()> {
    if let Some(budget) = cfg.epsilon_budget {
        if cfg.iterations > 0 {
            let first = ledger.epsilon_after(cfg.batch_size as u64).epsilon;
            if !(first <= budget) {
                return Err(Error::Infeasible(format!(
                    "one iteration already spends ε = {first:e} > budget {budget}"
                )));
            }
        }
    }
    Ok(())
}

fn budget_allows(ledger: &PrivacyLedger, cfg: &DpConfig) -> bool {
    cfg.epsilon_budget
        .is_none_or(|b| ledger.epsilon_after(cfg.batch_size as u64).epsilon <= b)
}

fn gaussian_batch(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn check_loss(name: &str, v: f64, iter: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{name} is not finite at iteration {iter}")))
    }
}

fn should_eval(cfg: &DpConfig, iter: usize) -> bool {
    let every = cfg.eval_every.max(1);
    iter.is_multiple_of(every) || iter + 1 == cfg.iterations
}

fn check_shapes(student: &MlpModel, generator: &MlpModel, cfg: &DpConfig) -> Result<()> {
    if generator.input_dim() != cfg.noise_dim {
        return Err(Error::dim(format!(
            "generator takes {} noise inputs, config says {}",
            generator.input_dim(),
            cfg.noise_dim
        )));
    }
    if generator.output_dim() != student.input_dim() {
        return Err(Error::dim(format!(
            "generator emits {}-d samples, student takes {}",
            generator.output_dim(),
            student.input_dim()
        )));
    }
    Ok(())
}

/// The private distillation loop, generic over the source of sanitized
/// gradients. Everything the student and generator learn from passes through
/// `oracle`.
pub fn train_with_oracle<O: PrivateGradientOracle>(
    oracle: &mut O,
    mut student: MlpModel,
    mut generator: MlpModel,
    cfg: &DpConfig,
    seed: u64,
    eval: Option<&LabeledDataset>,
    algorithm: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_shapes(&student, &generator, cfg)?;
    let classes = student.output_dim();
    let mut ledger = ledger_for(cfg, classes)?;
    precheck_budget(&ledger, cfg)?;

    let gamma = cfg.effective_gamma();
    let b = cfg.batch_size;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut stop_reason = StopReason::Completed;
    let mut runmin = f64::INFINITY;

    for iter in 0..cfg.iterations {
        if !budget_allows(&ledger, cfg) {
            stop_reason = StopReason::BudgetExhausted;
            break;
        }
        let z = gaussian_batch(&mut rng, b, cfg.noise_dim);
        let gen_trace = generator.forward(&z)?;
        let synthetic = gen_trace.logits().clone();
        let s_trace = student.forward(&synthetic)?;

        let OracleResponse {
            sanitized,
            diagnostics,
        } = oracle.query(&synthetic, s_trace.logits())?;
        ledger.record(b as u64);

        let target = match &sanitized {
            SanitizedGradient::Shared(g) => dp_target(s_trace.logits(), g, gamma)?,
            SanitizedGradient::PerExample(g) => dp_target_rows(s_trace.logits(), g, gamma)?,
        };

        let (l_s, grad) = student_loss(s_trace.logits(), &target)?;
        check_loss("L_S", l_s, iter)?;
        let grads = backward(&student, &s_trace, &grad)?;
        student = sgd_step(&student, &grads.layers, cfg.student_lr)?;

        // Generator step through the updated, frozen student.
        let s_trace = student.forward(&synthetic)?;
        let (_, ls_grad) = student_loss(s_trace.logits(), &target)?;
        let lg = generator_loss(s_trace.logits(), s_trace.features(), &cfg.generator_loss)?;
        check_loss("L_G", lg.loss, iter)?;
        let mut logit_grad = ls_grad;
        for (a, v) in logit_grad.data_mut().iter_mut().zip(lg.logit_grad.data()) {
            *a += v;
        }
        let through_student =
            backward_with_features(&student, &s_trace, &logit_grad, Some(&lg.feature_grad))?;
        let gen_grads = backward(&generator, &gen_trace, &through_student.input)?;
        generator = sgd_step(&generator, &gen_grads.layers, cfg.generator_lr)?;

        runmin = runmin.min(diagnostics.raw_grad_norm);
        let accuracy = match eval {
            Some(d) if should_eval(cfg, iter) => Some(d.accuracy_of(&student)?),
            _ => None,
        };
        records.push(IterationRecord {
            iter,
            teacher_loss: diagnostics.teacher_loss,
            student_loss: l_s,
            generator_loss: Some(lg.loss),
            accuracy,
            eps_spent: ledger.epsilon().epsilon,
            grad_norm: diagnostics.raw_grad_norm,
            gradnorm_runmin: runmin,
        });
    }

    let final_accuracy = eval.map(|d| d.accuracy_of(&student)).transpose()?;
    let class_balance_entropy = if cfg.probe_samples > 0 {
        let mut probe_rng = ChaCha20Rng::seed_from_u64(seed ^ PROBE_STREAM);
        let z = gaussian_batch(&mut probe_rng, cfg.probe_samples, cfg.noise_dim);
        let x = generator.forward(&z)?;
        let s = student.forward(x.logits())?;
        Some(mean_prediction_entropy(s.logits()))
    } else {
        None
    };
    Ok(TrainReport {
        algorithm: algorithm.to_string(),
        records,
        stop_reason,
        queries_composed: ledger.queries_composed,
        epsilon: ledger.epsilon(),
        delta: cfg.delta,
        epsilon_budget: cfg.epsilon_budget,
        final_accuracy,
        class_balance_entropy,
        gamma,
        norm_bound: cfg.mechanism.norm_bound,
        noise_scale: cfg.mechanism.noise_scale,
        classes,
        student,
        generator: Some(generator),
    })
}

/// Single-teacher private distillation.
pub fn dpdfd_train(
    teacher: &MlpModel,
    student: MlpModel,
    generator: MlpModel,
    cfg: &DpConfig,
    seed: u64,
    eval: Option<&LabeledDataset>,
) -> Result<TrainReport> {
    if teacher.input_dim() != student.input_dim() || teacher.output_dim() != student.output_dim() {
        return Err(Error::dim(format!(
            "teacher is {}→{}, student is {}→{}",
            teacher.input_dim(),
            teacher.output_dim(),
            student.input_dim(),
            student.output_dim()
        )));
    }
    let mut oracle = TeacherOracle::new(
        teacher,
        cfg.mechanism,
        cfg.distill_loss,
        NoiseSource::new(noise_seed(seed)),
    );
    train_with_oracle(&mut oracle, student, generator, cfg, seed, eval, "dpdfd")
}

/// Private distillation from several teachers with per-example noise.
/// The ledger is charged `B` queries per iteration, as for one teacher.
pub fn multi_model_train(
    ensemble: &EnsembleSpec,
    student: MlpModel,
    generator: MlpModel,
    cfg: &DpConfig,
    seed: u64,
    eval: Option<&LabeledDataset>,
) -> Result<TrainReport> {
    let t = &ensemble.teachers[0];
    if t.input_dim() != student.input_dim() || t.output_dim() != student.output_dim() {
        return Err(Error::dim("teachers and student disagree on shape"));
    }
    let mut oracle = EnsembleOracle::new(
        &ensemble.teachers,
        cfg.mechanism,
        cfg.distill_loss,
        NoiseSource::new(noise_seed(seed)),
    )?;
    train_with_oracle(&mut oracle, student, generator, cfg, seed, eval, "dpdfd-mm")
}

/// Private training directly on labeled data, without a generator.
///
/// Each example joins a batch independently with probability `B/N`
/// (`B ≥ N` takes the full set). An empty batch skips the update but is still
/// charged `B` queries.
pub fn direct_dp_train(
    data: &LabeledDataset,
    mut model: MlpModel,
    cfg: &DpConfig,
    seed: u64,
    eval: Option<&LabeledDataset>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("direct training needs a non-empty dataset"));
    }
    if model.input_dim() != data.dim() || model.output_dim() != data.classes() {
        return Err(Error::dim(format!(
            "model is {}→{}, data is {}-d with {} classes",
            model.input_dim(),
            model.output_dim(),
            data.dim(),
            data.classes()
        )));
    }
    let classes = data.classes();
    let mut ledger = ledger_for(cfg, classes)?;
    precheck_budget(&ledger, cfg)?;
    let gamma = cfg.effective_gamma();
    let n = data.len();
    let q = (cfg.batch_size as f64 / n as f64).min(1.0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut noise = NoiseSource::new(noise_seed(seed));
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut stop_reason = StopReason::Completed;
    let mut runmin = f64::INFINITY;

    for iter in 0..cfg.iterations {
        if !budget_allows(&ledger, cfg) {
            stop_reason = StopReason::BudgetExhausted;
            break;
        }
        let idx: Vec<usize> = if q >= 1.0 {
            (0..n).collect()
        } else {
            (0..n).filter(|_| rng.random::<f64>() < q).collect()
        };
        ledger.record(cfg.batch_size as u64);
        let (teacher_loss, student_loss_value, grad_norm) = if idx.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let x = data.inputs().select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let trace = model.forward(&x)?;
            let logits = trace.logits();
            let (ce, _) = softmax_cross_entropy(logits, &one_hot(&labels, classes)?)?;
            check_loss("private cross entropy", ce, iter)?;
            let per_example: Vec<Vec<f64>> = logits
                .iter_rows()
                .zip(&labels)
                .map(|(s, &y)| {
                    let mut g = softmax(s);
                    g[y] -= 1.0;
                    g
                })
                .collect();
            let mut mean = vec![0.0; classes];
            for g in &per_example {
                for (m, v) in mean.iter_mut().zip(g) {
                    *m += v / per_example.len() as f64;
                }
            }
            let sanitized = sanitize_batch(&per_example, &cfg.mechanism, &mut noise)?;
            let target = dp_target(logits, &sanitized, gamma)?;
            let (l_s, grad) = student_loss(logits, &target)?;
            check_loss("L_S", l_s, iter)?;
            let grads = backward(&model, &trace, &grad)?;
            model = sgd_step(&model, &grads.layers, cfg.student_lr)?;
            (ce, l_s, l2_norm(&mean))
        };
        if grad_norm.is_finite() {
            runmin = runmin.min(grad_norm);
        }
        let accuracy = match eval {
            Some(d) if should_eval(cfg, iter) => Some(d.accuracy_of(&model)?),
            _ => None,
        };
        records.push(IterationRecord {
            iter,
            teacher_loss,
            student_loss: student_loss_value,
            generator_loss: None,
            accuracy,
            eps_spent: ledger.epsilon().epsilon,
            grad_norm,
            gradnorm_runmin: runmin,
        });
    }

    Ok(TrainReport {
        algorithm: "direct".to_string(),
        records,
        stop_reason,
        queries_composed: ledger.queries_composed,
        epsilon: ledger.epsilon(),
        delta: cfg.delta,
        epsilon_budget: cfg.epsilon_budget,
        final_accuracy: eval.map(|d| d.accuracy_of(&model)).transpose()?,
        class_balance_entropy: None,
        gamma,
        norm_bound: cfg.mechanism.norm_bound,
        noise_scale: cfg.mechanism.noise_scale,
        classes,
        student: model,
        generator: None,
    })
}
