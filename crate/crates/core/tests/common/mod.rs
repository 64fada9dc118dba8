#![allow(dead_code)]

pub mod gradcheck;

use std::path::{Path, PathBuf};

use dpdfd::cli::RunConfig;
use dpdfd::datasets::{make_blobs, pretrain_teacher, DataSplit, PretrainConfig};
use dpdfd::nnkit::{MlpModel, ModelSpec};

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.json")
}

/// The 3-class blob fixture config.
pub fn fixture_config() -> RunConfig {
    RunConfig::from_file(&fixture_path()).unwrap()
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub split: DataSplit,
    pub teacher: MlpModel,
    pub teacher_accuracy: f64,
}

/// Fixture data plus a teacher pretrained exactly as `dpdfd pretrain --seed 0`.
pub fn fixture() -> Fixture {
    let cfg = fixture_config();
    let split = make_blobs(&cfg.blobs).unwrap();
    let pre = pretrain_teacher(
        &split.train,
        Some(&split.test),
        &ModelSpec::teacher(split.train.dim(), split.train.classes()),
        &PretrainConfig {
            steps: cfg.pretrain.steps,
            lr: cfg.pretrain.lr,
            batch: cfg.pretrain.batch,
            seed: 0,
        },
    )
    .unwrap();
    Fixture {
        cfg,
        split,
        teacher: pre.model,
        teacher_accuracy: pre.test_accuracy.unwrap(),
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
