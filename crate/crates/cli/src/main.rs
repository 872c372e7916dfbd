use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fat_core::config::ExperimentConfig;
use fat_core::experiment;

#[derive(Parser)]
#[command(name = "fat", version, about = "Federated alternate training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a warm-start model on the rectangle source task.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one federated experiment; writes metrics.csv and final.ckpt.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads for the silo jobs of a round.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
        /// Read silos and test set from an export-data directory instead of
        /// generating them.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Per-class Dice of a checkpoint on the test set.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Evaluate on this dataset file instead of the generated test set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the report CSV (default: <ckpt>.dice.csv).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the generated silos, test set and source set as dataset files.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the default configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out } => {
            let cfg = load(&config)?;
            let ckpt = experiment::cmd_pretrain(&cfg, &out)
                .with_context(|| format!("pretraining into {}", out.display()))?;
            println!("wrote {} ({})", out.display(), ckpt.provenance);
        }
        Command::Run {
            config,
            out_dir,
            jobs,
            data_dir,
        } => {
            let cfg = load(&config)?;
            let out = experiment::cmd_run(&cfg, &out_dir, data_dir.as_deref(), jobs as usize)
                .with_context(|| format!("running {}", config.display()))?;
            if let Some(last) = out.history.records.last() {
                let dice: Vec<String> = last.dice.iter().map(|d| format!("{d:.4}")).collect();
                println!("round {} dice [{}]", last.round, dice.join(", "));
            }
            println!("wrote {} and {}", out.metrics_path.display(), out.checkpoint_path.display());
        }
        Command::Evaluate {
            ckpt,
            config,
            data,
            report,
        } => {
            let cfg = load(&config)?;
            let rep = experiment::cmd_evaluate(&ckpt, &cfg, data.as_deref())
                .with_context(|| format!("evaluating {}", ckpt.display()))?;
            let csv = rep.to_csv();
            print!("{csv}");
            let path = report.unwrap_or_else(|| {
                let mut p = ckpt.clone().into_os_string();
                p.push(".dice.csv");
                p.into()
            });
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        }
        Command::ExportData { config, out_dir } => {
            let cfg = load(&config)?;
            let files = experiment::cmd_export_data(&cfg, &out_dir)?;
            println!("wrote {} dataset files to {}", files.len(), out_dir.display());
        }
        Command::InitConfig { out } => {
            ExperimentConfig::default().save(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
