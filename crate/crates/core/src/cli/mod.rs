//! Command-line front end: `pretrain | distill | dpsgd | account | sweep`.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_account, cmd_distill, cmd_dpsgd, cmd_pretrain, cmd_sweep, init_models, load_data,
    resolve_sigma, run_distill, AccountQuery, SweepAxis,
};
pub use config::{PretrainSettings, RunConfig, DEFAULT_SIGMA, SEED_ENV};

use crate::accountant::AccountingMode;
use crate::dpmech::BoundMode;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dpdfd", version, about = "Differentially private data-free distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a teacher on labeled data (not private).
    Pretrain(CommonArgs),
    /// Distill one or more teachers into a student through the private mechanism.
    Distill(CommonArgs),
    /// Train a model directly on private data with the same mechanism.
    Dpsgd(CommonArgs),
    /// Privacy accounting: ε for a run, σ for a target ε, or the longest run for a budget.
    Account {
        #[arg(value_enum)]
        query: AccountQuery,
        #[command(flatten)]
        common: CommonArgs,
        /// Length of the sanitized gradient (class count); defaults to the dataset's.
        #[arg(long)]
        classes: Option<usize>,
        /// Evaluate a single RDP order instead of optimizing over the grid.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Repeat distillation over a grid of values and seeds.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values (ignored for loss-terms).
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,
    /// Norm bound C.
    #[arg(long = "clip-bound", allow_negative_numbers = true)]
    clip_bound: Option<f64>,
    /// Stability constant e.
    #[arg(long, allow_negative_numbers = true)]
    stability: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    mode: Option<BoundMode>,
    #[arg(long)]
    accounting: Option<AccountingMode>,
    #[arg(long, num_args = 1..)]
    teachers: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step applied to the student outputs (default 1/C).
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
}

impl CommonArgs {
    fn merge(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.epsilon.is_some() {
            cfg.epsilon = self.epsilon;
        }
        if self.sigma.is_some() {
            cfg.sigma = self.sigma;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.clip_bound {
            cfg.clip_bound = v;
        }
        if let Some(v) = self.stability {
            cfg.stability = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.accounting {
            cfg.accounting = v;
        }
        if !self.teachers.is_empty() {
            cfg.teachers = self.teachers;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain(a) => {
            let mut cfg = a.merge()?;
            let seed = cfg.resolve_seed()?;
            cfg.validate()?;
            cmd_pretrain(&cfg, seed)
        }
        Command::Distill(a) => {
            let mut cfg = a.merge()?;
            let seed = cfg.resolve_seed()?;
            cmd_distill(&cfg, seed)
        }
        Command::Dpsgd(a) => {
            let mut cfg = a.merge()?;
            let seed = cfg.resolve_seed()?;
            cmd_dpsgd(&cfg, seed)
        }
        Command::Account {
            query,
            common,
            classes,
            lambda,
        } => {
            let cfg = common.merge()?;
            let classes = classes.unwrap_or(cfg.blobs.classes);
            if classes == 0 {
                return Err(Error::invalid("--classes must be positive"));
            }
            let v = cmd_account(&cfg, query, classes, lambda)?;
            Ok(serde_json::to_string_pretty(&v)?)
        }
        Command::Sweep {
            axis,
            values,
            seeds,
            common,
        } => {
            let mut cfg = common.merge()?;
            let seed = cfg.resolve_seed()?;
            cmd_sweep(&cfg, seed, axis, &values, seeds)
        }
    }
}

fn report(kind: &str, message: String, code: i32) -> i32 {
    let body = serde_json::json!({
        "error": kind,
        "message": message,
        "exit_code": code,
    });
    eprintln!("{body}");
    code
}

/// Runs the CLI on the process arguments and returns the exit code:
/// 0 success, 2 validation, 3 infeasible budget, 4 numerical failure.
/// Failures are reported on stderr as a JSON object.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return report("usage", e.render().to_string(), 2),
        Err(e) => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
    };
    match run(cli) {
        Ok(msg) => {
            // A reader that closed the pipe early (`| head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{msg}");
            0
        }
        Err(e) => report(e.kind(), e.to_string(), e.exit_code()),
    }
}
