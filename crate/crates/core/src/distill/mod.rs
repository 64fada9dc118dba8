//! Private knowledge distillation: single teacher, teacher ensembles, and
//! direct training on private data.

mod config;
mod losses;
mod monitor;
pub mod oracle;
mod report;
mod train;

pub use config::{DpConfig, GammaSchedule};
pub use losses::{
    distillation_loss, dp_target, dp_target_rows, generator_loss, mean_prediction_entropy,
    student_loss, DistillLossConfig, FeatureTermSign, GeneratorLoss, GeneratorLossWeights,
};
pub use monitor::{convergence_monitor, ConvergenceSummary};
pub use report::{IterationRecord, StopReason, TrainReport};
pub use train::{
    direct_dp_train, dpdfd_train, multi_model_train, noise_seed, train_with_oracle, EnsembleSpec,
};
