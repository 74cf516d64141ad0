//! `mdistill`: train teachers, distill students, evaluate checkpoints and
//! sweep the distillation weight from experiment config files.
//!
//! Exit codes: 0 success, 1 a check reported failures, 2 configuration or
//! usage error, 3 numeric failure during compute.

mod commands;
mod config;
mod gradcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metric_distill::loss::DistillMode;

use commands::{parse_list, parse_semi, DistillFlags, SweepRequest};
use config::{ExperimentConfig, SemiSection};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<metric_distill::Error> for CliError {
    fn from(e: metric_distill::Error) -> Self {
        use metric_distill::Error as E;
        match e {
            E::Config(_) | E::Data(_) | E::Sampling(_) | E::Eval(_) | E::Csv { .. } => CliError::Config(e.to_string()),
            E::Io { .. } | E::Checkpoint { .. } => CliError::Io(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mdistill", version, about = "Metric learning with teacher-student embedding distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a teacher with the triplet loss alone.
    TrainTeacher {
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student under a frozen teacher.
    Distill {
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// baseline, abs or rel.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DistillMode>,
        /// Add the hint loss over the config's `hint_pairs`.
        #[arg(long)]
        hint: bool,
        /// Add the attention loss over the config's `attention_pairs`.
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        lambda: Option<f64>,
        /// FRACTION, FRACTION+unlabeled or kd-only.
        #[arg(long, value_parser = parse_semi)]
        semi: Option<SemiSection>,
        /// Student-side degradation: lowres:F, noise:SIGMA or mask:FRACTION.
        #[arg(long)]
        cross_quality: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall@K of a checkpoint on a CSV dataset or a config's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated cutoffs.
        #[arg(long, default_value = "1,2,4,8,16")]
        k: String,
        /// Report path; defaults to `eval_<dataset>.txt` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation and test Recall@1 per mode and lambda, averaged over seeds.
    SweepLambda {
        config: PathBuf,
        /// Comma-separated distillation weights.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "abs,rel")]
        modes: String,
        /// Comma-separated seeds; defaults to the config's train seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Reuse a trained teacher instead of training one from the config.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive, loss and layer.
    Gradcheck {
        #[arg(long, hide = true)]
        broken_fixture: bool,
    },
}

fn parse_mode(s: &str) -> Result<DistillMode, String> {
    s.parse().map_err(|e: metric_distill::Error| e.to_string())
}

fn list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>, CliError> {
    parse_list(s).map_err(|e| CliError::Config(format!("{flag}: {e}")))
}

fn load(config: &PathBuf, out: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut c = ExperimentConfig::load(config)?;
    if out.is_some() {
        c.output_dir = out;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainTeacher { config, out } => commands::train_teacher_cmd(&load(&config, out)?),
        Command::Distill {
            config,
            teacher,
            mode,
            hint,
            attention,
            lambda,
            semi,
            cross_quality,
            out,
        } => {
            let mut c = load(&config, out)?;
            DistillFlags {
                mode,
                hint,
                attention,
                lambda,
                semi,
                cross_quality,
            }
            .merge_into(&mut c);
            commands::distill_cmd(&c, &teacher)
        }
        Command::Eval { checkpoint, dataset, k, out } => {
            let k = list::<usize>(&k, "--k")?;
            commands::eval_cmd(&checkpoint, &dataset, &k, out.as_deref()).map(|_| ())
        }
        Command::SweepLambda {
            config,
            values,
            modes,
            seeds,
            jobs,
            teacher,
            out,
        } => {
            let c = load(&config, out)?;
            let values = list::<f64>(&values, "--values")?;
            let seeds = seeds.map(|s| list::<u64>(&s, "--seeds")).transpose()?;
            let modes = list::<String>(&modes, "--modes")?
                .iter()
                .map(|m| parse_mode(m).map_err(CliError::Config))
                .collect::<Result<Vec<_>, _>>()?;
            let req = SweepRequest {
                values,
                modes,
                seeds: seeds.unwrap_or_else(|| vec![c.train.seed]),
                jobs,
                teacher,
            };
            commands::sweep_cmd(&c, &req).map(|_| ())
        }
        Command::Gradcheck { broken_fixture } => {
            let rows = gradcheck::run(broken_fixture)?;
            let failed = rows.iter().filter(|r| !r.passed()).count();
            for row in &rows {
                println!("{}", row.to_line());
            }
            println!("checks={} failed={failed} tol={:e}", rows.len(), gradcheck::TOL);
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdistill: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
