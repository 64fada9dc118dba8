use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{AccountingMode, AccountingParams};
use crate::datasets::{BlobSpec, PretrainConfig};
use crate::distill::{DistillLossConfig, DpConfig, GammaSchedule, GeneratorLossWeights};
use crate::dpmech::{BoundMode, MechanismConfig};
use crate::error::{Error, Result};

/// Environment variable consulted when neither the flags nor the config file
/// set a seed.
pub const SEED_ENV: &str = "DPDFD_SEED";

/// Everything one command needs, merged from defaults, a JSON config file
/// and command-line flags (in increasing priority).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Labeled CSV (`label,p1,…,pd`); when absent a blob dataset is generated.
    pub data: Option<PathBuf>,
    pub blobs: BlobSpec,
    /// Held-out fraction when splitting a CSV dataset.
    pub test_fraction: f64,
    pub pretrain: PretrainSettings,
    pub teachers: Vec<PathBuf>,
    pub student_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,

    /// ε budget. When `sigma` is absent it is also used to calibrate σ for
    /// the full run.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: Option<f64>,
    pub clip_bound: f64,
    pub stability: f64,
    pub mode: BoundMode,
    pub accounting: AccountingMode,
    pub batch: usize,
    pub iters: usize,
    /// `γ`; when absent, `1/C` (a unit step in logit space).
    pub gamma: Option<f64>,
    pub gamma_schedule: GammaSchedule,
    pub student_lr: f64,
    pub generator_lr: f64,
    pub generator_loss: GeneratorLossWeights,
    pub distill_loss: DistillLossConfig,
    pub noise_dim: usize,
    pub eval_every: usize,
    pub probe_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSettings {
            steps: d.steps,
            lr: d.lr,
            batch: d.batch,
        }
    }
}

/// Default noise scale when neither σ nor an ε budget is configured.
pub const DEFAULT_SIGMA: f64 = 100.0;

impl Default for RunConfig {
    fn default() -> Self {
        let dp = DpConfig::default();
        RunConfig {
            seed: None,
            out: PathBuf::from("out"),
            data: None,
            blobs: BlobSpec::default(),
            test_fraction: 0.2,
            pretrain: PretrainSettings::default(),
            teachers: Vec::new(),
            student_hidden: vec![32],
            generator_hidden: vec![64, 64],
            epsilon: None,
            delta: dp.delta,
            sigma: None,
            clip_bound: dp.mechanism.norm_bound,
            stability: dp.mechanism.stability,
            mode: dp.mechanism.mode,
            accounting: dp.accounting,
            batch: dp.batch_size,
            iters: dp.iterations,
            gamma: None,
            gamma_schedule: dp.gamma_schedule,
            student_lr: dp.student_lr,
            generator_lr: dp.generator_lr,
            generator_loss: dp.generator_loss,
            distill_loss: dp.distill_loss,
            noise_dim: dp.noise_dim,
            eval_every: 100,
            probe_samples: dp.probe_samples,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Seed from the config, else `DPDFD_SEED`, else 0.
    pub fn resolve_seed(&mut self) -> Result<u64> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let s = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("{SEED_ENV}=`{v}` is not a u64")))?;
                self.seed = Some(s);
            }
        }
        Ok(*self.seed.get_or_insert(0))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(Error::invalid(format!("--epsilon {e} must be positive")));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        if self.student_hidden.contains(&0) || self.generator_hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        self.mechanism(self.sigma.unwrap_or(DEFAULT_SIGMA)).validate()?;
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("gamma {g} must be positive")));
            }
        }
        Ok(())
    }

    pub fn mechanism(&self, sigma: f64) -> MechanismConfig {
        MechanismConfig {
            norm_bound: self.clip_bound,
            noise_scale: sigma,
            stability: self.stability,
            mode: self.mode,
        }
    }

    pub fn accounting_params(&self, classes: usize, sigma: f64) -> AccountingParams {
        AccountingParams {
            norm_bound: self.clip_bound,
            classes: classes as u64,
            batch: self.batch as u64,
            iterations: self.iters as u64,
            noise_scale: sigma,
            delta: self.delta,
            mode: self.accounting,
        }
    }

    pub fn dp_config(&self, sigma: f64) -> DpConfig {
        DpConfig {
            mechanism: self.mechanism(sigma),
            gamma: self.gamma.unwrap_or(1.0 / self.clip_bound),
            gamma_schedule: self.gamma_schedule,
            student_lr: self.student_lr,
            generator_lr: self.generator_lr,
            batch_size: self.batch,
            iterations: self.iters,
            delta: self.delta,
            epsilon_budget: self.epsilon,
            accounting: self.accounting,
            distill_loss: self.distill_loss,
            generator_loss: self.generator_loss,
            noise_dim: self.noise_dim,
            eval_every: self.eval_every,
            probe_samples: self.probe_samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults_and_rejects_typos() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"iters": 5, "clip_bound": 0.01}"#).unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!((c.iters, c.clip_bound), (5, 0.01));
        assert_eq!(c.batch, RunConfig::default().batch);
        assert_eq!(c.dp_config(1.0).gamma, 100.0);

        std::fs::write(&p, r#"{"itres": 5}"#).unwrap();
        assert!(matches!(RunConfig::from_file(&p), Err(Error::Format(_))));
        assert!(matches!(
            RunConfig::from_file(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn seed_priority() {
        let mut c = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        std::env::set_var(SEED_ENV, "11");
        assert_eq!(c.resolve_seed().unwrap(), 9);
        c.seed = None;
        assert_eq!(c.resolve_seed().unwrap(), 11);
        std::env::set_var(SEED_ENV, "eleven");
        c.seed = None;
        assert!(c.resolve_seed().is_err());
        std::env::remove_var(SEED_ENV);
        c.seed = None;
        assert_eq!(c.resolve_seed().unwrap(), 0);
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        for c in [
            RunConfig { epsilon: Some(-1.0), ..RunConfig::default() },
            RunConfig { clip_bound: 0.0, ..RunConfig::default() },
            RunConfig { gamma: Some(f64::INFINITY), ..RunConfig::default() },
            RunConfig { test_fraction: 1.0, ..RunConfig::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn accounting_params_mirror_the_run() {
        let c = RunConfig {
            batch: 4,
            iters: 9,
            ..RunConfig::default()
        };
        let p = c.accounting_params(3, 2.0);
        assert_eq!((p.classes, p.batch, p.iterations, p.noise_scale), (3, 4, 9, 2.0));
        assert_eq!(p.queries(), 36);
    }
}
