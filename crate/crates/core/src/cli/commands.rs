use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::{RunConfig, DEFAULT_SIGMA};
use crate::accountant::{calibrate_sigma, max_iterations, optimal_epsilon, LambdaGrid};
use crate::datasets::{
    load_grid_csv, make_blobs, pretrain_teacher, stratified_split, DataSplit, DatasetManifest,
    PretrainConfig,
};
use crate::distill::{
    direct_dp_train, dpdfd_train, multi_model_train, EnsembleSpec, GeneratorLossWeights, TrainReport,
};
use crate::dpmech::BoundMode;
use crate::error::{Error, Result};
use crate::nnkit::{checkpoint, Activation, MlpModel, ModelSpec};

const MODEL_STREAM: u64 = 0x5851_F42D_4C95_7F2D;

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<DataSplit> {
    match &cfg.data {
        Some(path) => stratified_split(&load_grid_csv(path, None)?, cfg.test_fraction, seed),
        None => make_blobs(&cfg.blobs),
    }
}

fn student_spec(cfg: &RunConfig, dim: usize, classes: usize) -> ModelSpec {
    let mut dims = vec![dim];
    dims.extend(&cfg.student_hidden);
    dims.push(classes);
    ModelSpec {
        dims,
        hidden: Activation::Relu,
        output: Activation::Identity,
    }
}

fn generator_spec(cfg: &RunConfig, dim: usize) -> ModelSpec {
    let mut dims = vec![cfg.noise_dim];
    dims.extend(&cfg.generator_hidden);
    dims.push(dim);
    ModelSpec {
        dims,
        hidden: Activation::Relu,
        output: Activation::Tanh,
    }
}

/// Fresh student and generator for a run seeded with `seed`.
pub fn init_models(cfg: &RunConfig, dim: usize, classes: usize, seed: u64) -> Result<(MlpModel, MlpModel)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ MODEL_STREAM);
    let student = MlpModel::init(&student_spec(cfg, dim, classes), &mut rng)?;
    let generator = MlpModel::init(&generator_spec(cfg, dim), &mut rng)?;
    Ok((student, generator))
}

/// σ from the config; otherwise calibrated to the ε budget over the whole
/// run; otherwise the default.
pub fn resolve_sigma(cfg: &RunConfig, classes: usize) -> Result<f64> {
    match (cfg.sigma, cfg.epsilon) {
        (Some(s), _) => Ok(s),
        (None, Some(eps)) => calibrate_sigma(
            eps,
            &cfg.accounting_params(classes, 1.0),
            &LambdaGrid::standard(),
        ),
        (None, None) => Ok(DEFAULT_SIGMA),
    }
}

fn echo_config(cfg: &RunConfig, sigma: Option<f64>) -> Result<()> {
    let mut effective = cfg.clone();
    if let Some(s) = sigma {
        effective.sigma = Some(s);
        effective.gamma = Some(cfg.gamma.unwrap_or(1.0 / cfg.clip_bound));
    }
    write_json(&cfg.out.join("config.json"), &effective)
}

#[derive(Debug, Serialize)]
struct PretrainMetrics {
    seed: u64,
    classes: usize,
    dim: usize,
    train_size: usize,
    test_size: usize,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    final_loss: Option<f64>,
    majority_baseline: f64,
}

pub fn cmd_pretrain(cfg: &RunConfig, seed: u64) -> Result<String> {
    prepare_out(cfg)?;
    let split = load_data(cfg, seed)?;
    let spec = ModelSpec::teacher(split.train.dim(), split.train.classes());
    let pre = pretrain_teacher(
        &split.train,
        Some(&split.test),
        &spec,
        &PretrainConfig {
            steps: cfg.pretrain.steps,
            lr: cfg.pretrain.lr,
            batch: cfg.pretrain.batch,
            seed,
        },
    )?;
    checkpoint::save(&pre.model, cfg.out.join("teacher.json"))?;
    let metrics = PretrainMetrics {
        seed,
        classes: split.train.classes(),
        dim: split.train.dim(),
        train_size: split.train.len(),
        test_size: split.test.len(),
        train_accuracy: pre.train_accuracy,
        test_accuracy: pre.test_accuracy,
        final_loss: pre.final_loss,
        majority_baseline: split.test.majority_baseline(),
    };
    write_json(&cfg.out.join("metrics.json"), &metrics)?;
    if cfg.data.is_none() {
        write_json(&cfg.out.join("dataset.json"), &DatasetManifest::from(&cfg.blobs))?;
    }
    echo_config(cfg, None)?;
    Ok(format!(
        "train_accuracy={:.4} test_accuracy={:.4}",
        pre.train_accuracy,
        pre.test_accuracy.unwrap_or(f64::NAN)
    ))
}

fn load_teachers(cfg: &RunConfig) -> Result<Vec<MlpModel>> {
    if cfg.teachers.is_empty() {
        return Err(Error::invalid("no teacher checkpoints given (--teachers <path>...)"));
    }
    cfg.teachers.iter().map(checkpoint::load).collect()
}

/// One distillation run; used by `distill` and by every sweep point.
pub fn run_distill(
    cfg: &RunConfig,
    teachers: &[MlpModel],
    split: &DataSplit,
    seed: u64,
) -> Result<(TrainReport, f64)> {
    let classes = split.train.classes();
    let sigma = resolve_sigma(cfg, classes)?;
    let dp = cfg.dp_config(sigma);
    let (student, generator) = init_models(cfg, split.train.dim(), classes, seed)?;
    let report = match teachers {
        [one] => dpdfd_train(one, student, generator, &dp, seed, Some(&split.test))?,
        many => {
            let ensemble = EnsembleSpec::new(many.to_vec())?;
            multi_model_train(&ensemble, student, generator, &dp, seed, Some(&split.test))?
        }
    };
    Ok((report, sigma))
}

fn final_line(report: &TrainReport) -> String {
    format!(
        "accuracy={:.4} epsilon={:.6} delta={:e} iterations={} stop={:?}",
        report.final_accuracy.unwrap_or(f64::NAN),
        report.epsilon.epsilon,
        report.delta,
        report.iterations_run(),
        report.stop_reason
    )
}

pub fn cmd_distill(cfg: &RunConfig, seed: u64) -> Result<String> {
    cfg.validate()?;
    let teachers = load_teachers(cfg)?;
    let split = load_data(cfg, seed)?;
    let (report, sigma) = run_distill(cfg, &teachers, &split, seed)?;
    prepare_out(cfg)?;
    report.write_files(&cfg.out)?;
    checkpoint::save(&report.student, cfg.out.join("student.json"))?;
    if let Some(g) = &report.generator {
        checkpoint::save(g, cfg.out.join("generator.json"))?;
    }
    echo_config(cfg, Some(sigma))?;
    Ok(final_line(&report))
}

pub fn cmd_dpsgd(cfg: &RunConfig, seed: u64) -> Result<String> {
    cfg.validate()?;
    let split = load_data(cfg, seed)?;
    let classes = split.train.classes();
    let sigma = resolve_sigma(cfg, classes)?;
    let (model, _) = init_models(cfg, split.train.dim(), classes, seed)?;
    let report = direct_dp_train(&split.train, model, &cfg.dp_config(sigma), seed, Some(&split.test))?;
    prepare_out(cfg)?;
    report.write_files(&cfg.out)?;
    checkpoint::save(&report.student, cfg.out.join("model.json"))?;
    echo_config(cfg, Some(sigma))?;
    Ok(final_line(&report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AccountQuery {
    Epsilon,
    Sigma,
    MaxIters,
}

/// Answers an accounting question as a JSON document.
pub fn cmd_account(
    cfg: &RunConfig,
    query: AccountQuery,
    classes: usize,
    lambda: Option<f64>,
) -> Result<serde_json::Value> {
    let grid = match lambda {
        Some(l) => LambdaGrid::single(l)?,
        None => LambdaGrid::standard(),
    };
    let sigma = cfg.sigma.unwrap_or(DEFAULT_SIGMA);
    let params = cfg.accounting_params(classes, sigma);
    let need_eps = || {
        cfg.epsilon
            .ok_or_else(|| Error::invalid("this query needs --epsilon"))
    };
    let (mut out, params) = match query {
        AccountQuery::Epsilon => {
            let e = optimal_epsilon(&params, &grid)?;
            let v = json!({ "query": "epsilon", "epsilon": e.epsilon, "lambda_star": e.lambda_star, "clamped": e.clamped });
            (v, params)
        }
        AccountQuery::Sigma => {
            let target = need_eps()?;
            let s = calibrate_sigma(target, &params, &grid)?;
            let params = params.with_noise_scale(s);
            let e = optimal_epsilon(&params, &grid)?;
            let v = json!({ "query": "sigma", "sigma": s, "target_epsilon": target, "epsilon": e.epsilon, "lambda_star": e.lambda_star });
            (v, params)
        }
        AccountQuery::MaxIters => {
            let budget = need_eps()?;
            let t = max_iterations(budget, &params, &grid)?;
            let params = params.with_iterations(t);
            let e = optimal_epsilon(&params, &grid)?;
            let v = json!({ "query": "max-iters", "max_iterations": t, "budget": budget, "epsilon": e.epsilon, "lambda_star": e.lambda_star });
            (v, params)
        }
    };
    out["mode"] = json!(cfg.accounting.to_string());
    out["params"] = serde_json::to_value(params)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    C,
    Sigma,
    LossTerms,
}

struct SweepPoint {
    value: String,
    mode: BoundMode,
    seed: u64,
    cfg: RunConfig,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: String,
    value: String,
    mode: String,
    seed: u64,
    status: String,
    accuracy: Option<f64>,
    epsilon: Option<f64>,
    sigma: Option<f64>,
    entropy: Option<f64>,
    iterations: Option<usize>,
    error: String,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    axis: String,
    value: String,
    mode: String,
    runs: usize,
    failed: usize,
    mean_accuracy: Option<f64>,
    std_accuracy: Option<f64>,
    mean_entropy: Option<f64>,
}

fn loss_term_grid(base: &GeneratorLossWeights) -> Vec<(String, GeneratorLossWeights)> {
    let mut out = Vec::new();
    for mask in (0..8u8).rev() {
        let (ce, ie, norm) = (mask & 4 != 0, mask & 2 != 0, mask & 1 != 0);
        let mut names = Vec::new();
        if ce {
            names.push("ce");
        }
        if ie {
            names.push("ie");
        }
        if norm {
            names.push("norm");
        }
        let label = if names.is_empty() { "none".to_string() } else { names.join("+") };
        out.push((
            label,
            GeneratorLossWeights {
                ce: if ce { base.ce } else { 0.0 },
                alpha: if ie { base.alpha } else { 0.0 },
                beta: if norm { base.beta } else { 0.0 },
                feature_sign: base.feature_sign,
            },
        ));
    }
    out
}

fn sweep_points(cfg: &RunConfig, axis: SweepAxis, values: &[f64], seeds: usize, base: u64) -> Result<Vec<SweepPoint>> {
    let mut variants: Vec<(String, BoundMode, RunConfig)> = Vec::new();
    match axis {
        SweepAxis::C => {
            for &c in values {
                for mode in [BoundMode::Normalize, BoundMode::Clip] {
                    let mut v = cfg.clone();
                    v.clip_bound = c;
                    v.mode = mode;
                    variants.push((format!("{c:e}"), mode, v));
                }
            }
        }
        SweepAxis::Sigma => {
            for &s in values {
                let mut v = cfg.clone();
                v.sigma = Some(s);
                variants.push((format!("{s}"), cfg.mode, v));
            }
        }
        SweepAxis::LossTerms => {
            for (label, w) in loss_term_grid(&cfg.generator_loss) {
                let mut v = cfg.clone();
                v.generator_loss = w;
                variants.push((label, cfg.mode, v));
            }
        }
    }
    if variants.is_empty() {
        return Err(Error::invalid("sweep has no values"));
    }
    let mut points = Vec::new();
    for (value, mode, v) in variants {
        for _ in 0..seeds {
            let index = points.len() as u64;
            points.push(SweepPoint {
                value: value.clone(),
                mode,
                seed: base ^ index,
                cfg: v.clone(),
            });
        }
    }
    Ok(points)
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    seed: u64,
    axis: SweepAxis,
    values: &[f64],
    seeds: usize,
) -> Result<String> {
    cfg.validate()?;
    if seeds == 0 {
        return Err(Error::invalid("--seeds must be at least 1"));
    }
    if axis != SweepAxis::LossTerms && values.is_empty() {
        return Err(Error::invalid("--values must list at least one value"));
    }
    let teachers = load_teachers(cfg)?;
    let split = load_data(cfg, seed)?;
    let points = sweep_points(cfg, axis, values, seeds, seed)?;
    let axis_name = match axis {
        SweepAxis::C => "C",
        SweepAxis::Sigma => "sigma",
        SweepAxis::LossTerms => "loss-terms",
    };
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|p| {
            let (status, report, sigma, error) =
                match p.cfg.validate().and_then(|_| run_distill(&p.cfg, &teachers, &split, p.seed)) {
                    Ok((r, s)) => ("ok", Some(r), Some(s), String::new()),
                    Err(e) => ("failed", None, None, e.to_string()),
                };
            SweepRow {
                axis: axis_name.to_string(),
                value: p.value.clone(),
                mode: p.mode.to_string(),
                seed: p.seed,
                status: status.to_string(),
                accuracy: report.as_ref().and_then(|r| r.final_accuracy),
                epsilon: report.as_ref().map(|r| r.epsilon.epsilon),
                sigma,
                entropy: report.as_ref().and_then(|r| r.class_balance_entropy),
                iterations: report.as_ref().map(|r| r.iterations_run()),
                error,
            }
        })
        .collect();

    let mut summary: Vec<SummaryRow> = Vec::new();
    for r in &rows {
        if !summary.iter().any(|s| s.value == r.value && s.mode == r.mode) {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|x| x.value == r.value && x.mode == r.mode)
                .collect();
            let accs: Vec<f64> = group.iter().filter_map(|x| x.accuracy).collect();
            let ents: Vec<f64> = group.iter().filter_map(|x| x.entropy).collect();
            let (mean, std) = mean_std(&accs);
            summary.push(SummaryRow {
                axis: axis_name.to_string(),
                value: r.value.clone(),
                mode: r.mode.clone(),
                runs: group.len(),
                failed: group.iter().filter(|x| x.status != "ok").count(),
                mean_accuracy: mean,
                std_accuracy: std,
                mean_entropy: mean_std(&ents).0,
            });
        }
    }

    prepare_out(cfg)?;
    write_csv(&cfg.out.join("runs.csv"), &rows)?;
    write_csv(&cfg.out.join("summary.csv"), &summary)?;
    echo_config(cfg, None)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    Ok(format!("runs={} failed={failed} groups={}", rows.len(), summary.len()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
