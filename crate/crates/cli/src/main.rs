use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cakd::experiments::{self, ExperimentConfig, Sweep, VerifyOptions};
use cakd::train::DistillMode;
use cakd::Mlp;
use clap::{Parser, Subcommand};

/// Decoupled-KL knowledge distillation experiments.
#[derive(Parser)]
#[command(name = "cakd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized identity and gradient checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the recomposed loss so the identity checks must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train the teacher with cross-entropy; writes a checkpoint and metrics.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill one student per seed from a teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// ce, kd, cakd-logit, cakd-feature or cakd-full
        #[arg(long)]
        mode: String,
    },
    /// Run an ablation sweep: alpha-beta, loss-ratio or components.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: String,
        /// Teacher checkpoint; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Summarize metrics CSV files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Directory for final.csv, summary.csv and series.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_teacher(path: &Path) -> Result<Mlp> {
    Mlp::load(path).with_context(|| format!("loading teacher {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify { seed, inject_fault } => {
            let report = experiments::verify(&VerifyOptions {
                seed,
                inject_fault,
                ..VerifyOptions::default()
            });
            print!("{}", report.render());
            return Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        Command::TrainTeacher { config } => {
            let cfg = load_config(&config)?;
            let run = experiments::train_teacher(&cfg)?;
            match run.metrics.iter().rev().find(|r| r.split == "test") {
                Some(r) => println!("teacher test accuracy {:.4} after {} epochs", r.accuracy, r.epoch + 1),
                None => println!("teacher saved with initial weights (no epochs)"),
            }
            println!("checkpoint {}", run.checkpoint.display());
            println!("metrics {}", run.metrics_path.display());
        }
        Command::Distill { config, teacher, mode } => {
            let cfg = load_config(&config)?;
            let mode: DistillMode = mode.parse()?;
            let teacher = load_teacher(&teacher)?;
            let run = experiments::distill(&cfg, &teacher, mode)?;
            let mut accs = Vec::new();
            for s in &run.students {
                if let Some(r) = s.final_record("test") {
                    println!("{mode} seed {} test accuracy {:.4}", s.seed, r.accuracy);
                    accs.push(r.accuracy);
                }
            }
            if !accs.is_empty() {
                let (mean, sd) = experiments::mean_sd(&accs);
                println!("{mode} mean {mean:.4} sd {sd:.4} over {} seeds", accs.len());
            }
            println!("metrics {}", run.metrics_path.display());
        }
        Command::Ablate { config, sweep, teacher } => {
            let cfg = load_config(&config)?;
            let sweep: Sweep = sweep.parse()?;
            let teacher = match teacher {
                Some(p) => load_teacher(&p)?,
                None => {
                    let (train, test) = cfg.data.load()?;
                    experiments::fit_teacher(&cfg, &train, &test)?.0
                }
            };
            let table = experiments::ablate(&cfg, &teacher, sweep)?;
            let path = table.write(&cfg)?;
            for r in table.means() {
                println!("{sweep} {:<24} mean accuracy {:.4} ps/pw {:.3}", r.setting, r.accuracy, r.ps_pw);
            }
            println!("table {}", path.display());
        }
        Command::Report { files, out } => {
            let report = experiments::report(&files)?;
            print!("{}", report.summary_csv());
            if let Some(dir) = out {
                report.write(&dir)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
