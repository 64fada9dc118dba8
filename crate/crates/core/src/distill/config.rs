use serde::{Deserialize, Serialize};

use super::losses::{DistillLossConfig, GeneratorLossWeights};
use crate::accountant::AccountingMode;
use crate::dpmech::MechanismConfig;
use crate::error::{Error, Result};

/// Scaling of the private-target step `γ` over a run of `T` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    #[default]
    Constant,
    /// `γ/√T`, held fixed for the whole run.
    InverseSqrtT,
}

/// Everything a private training run needs besides the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub mechanism: MechanismConfig,
    /// `γ`, step applied to the student outputs to form the private target.
    pub gamma: f64,
    pub gamma_schedule: GammaSchedule,
    /// `γ_s`
    pub student_lr: f64,
    /// `γ_g`
    pub generator_lr: f64,
    /// `B`
    pub batch_size: usize,
    /// `T`
    pub iterations: usize,
    pub delta: f64,
    /// Stop before the ledger would exceed this ε. `None` means unbounded.
    pub epsilon_budget: Option<f64>,
    pub accounting: AccountingMode,
    pub distill_loss: DistillLossConfig,
    pub generator_loss: GeneratorLossWeights,
    /// Width of the generator's input noise.
    pub noise_dim: usize,
    /// Evaluate held-out accuracy every this many iterations (and at the end).
    pub eval_every: usize,
    /// Samples drawn from the final generator to measure class balance.
    pub probe_samples: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            mechanism: MechanismConfig::default(),
            gamma: 0.05,
            gamma_schedule: GammaSchedule::Constant,
            student_lr: 0.05,
            generator_lr: 0.05,
            batch_size: 256,
            iterations: 1000,
            delta: 1e-5,
            epsilon_budget: None,
            accounting: AccountingMode::Absolute,
            distill_loss: DistillLossConfig::default(),
            generator_loss: GeneratorLossWeights::default(),
            noise_dim: 16,
            eval_every: 1,
            probe_samples: 1024,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        self.mechanism.validate()?;
        for (name, v) in [
            ("gamma", self.gamma),
            ("student_lr", self.student_lr),
            ("generator_lr", self.generator_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be positive")));
            }
        }
        if self.batch_size == 0 || self.noise_dim == 0 {
            return Err(Error::invalid("batch_size and noise_dim must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("δ = {} must lie in (0, 1)", self.delta)));
        }
        if let Some(b) = self.epsilon_budget {
            if !(b > 0.0) {
                return Err(Error::invalid(format!("ε budget {b} must be positive")));
            }
        }
        let g = &self.generator_loss;
        if !(g.ce >= 0.0 && g.alpha >= 0.0 && g.beta >= 0.0) {
            return Err(Error::invalid("generator loss weights must be >= 0"));
        }
        Ok(())
    }

    /// `γ` after applying the schedule.
    pub fn effective_gamma(&self) -> f64 {
        match self.gamma_schedule {
            GammaSchedule::Constant => self.gamma,
            GammaSchedule::InverseSqrtT => self.gamma / (self.iterations.max(1) as f64).sqrt(),
        }
    }
}
