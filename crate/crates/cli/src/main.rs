use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ggp::harness::{emit_metrics, run_ablation, run_finetune, run_full, run_pretrain, run_selftest, ExperimentConfig};
use ggp::nn::load_checkpoint;

#[derive(Parser)]
#[command(name = "ggp-train", version, about = "Gradient-guided perturbation training runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on image-caption pairs and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pre-trained checkpoint on VQA.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train then fine-tune, with one metrics file for both phases.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the five-row perturbation ablation over seeds 0..N.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Print the default configuration.
    DefaultConfig,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = run_pretrain(&cfg, Some(&out))?;
            let extra = serde_json::json!({ "digests": outcome.digests });
            emit_metrics(&outcome.records, &cfg, extra, &out)?;
            let last = outcome.records.last().expect("at least one epoch");
            println!(
                "pre-training done: itc {:.4} itm {:.4} mlm {:.4}; checkpoint {}",
                last.loss_itc.unwrap_or(f64::NAN),
                last.loss_itm.unwrap_or(f64::NAN),
                last.loss_mlm.unwrap_or(f64::NAN),
                outcome.checkpoint_path.expect("output dir given").display()
            );
        }
        Command::Finetune {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ckpt =
                load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let outcome = run_finetune(&cfg, &ckpt, Some(&out))?;
            let extra = serde_json::json!({
                "load_report": outcome.load_report,
                "val_accuracy": outcome.val_accuracy,
                "train_accuracy": outcome.train_accuracy,
                "digests": outcome.digests,
            });
            emit_metrics(&outcome.records, &cfg, extra, &out)?;
            let v = outcome.val_accuracy;
            println!(
                "fine-tuning done: val open {:.4} closed {:.4} overall {:.4}; train overall {:.4}",
                v.open(),
                v.closed(),
                v.overall(),
                outcome.train_accuracy.overall()
            );
        }
        Command::Run { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, ft) = run_full(&cfg, &out)?;
            let v = ft.val_accuracy;
            println!(
                "val open {:.4} closed {:.4} overall {:.4}; outputs in {}",
                v.open(),
                v.closed(),
                v.overall(),
                out.display()
            );
        }
        Command::Ablation { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            if seeds < 3 {
                bail!("--seeds must be at least 3");
            }
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = run_ablation(&cfg, &seeds, Some(&out))?;
            print!("{}", report.table());
            for r in &report.rows {
                for (seed, err) in &r.failures {
                    eprintln!("{} seed {seed} failed: {err}", r.label);
                }
            }
        }
        Command::Selftest => {
            let mut ok = true;
            for r in run_selftest() {
                match r.outcome {
                    Ok(detail) => println!("PASS {}: {detail}", r.name),
                    Err(e) => {
                        ok = false;
                        println!("FAIL {}: {e}", r.name);
                    }
                }
            }
            return Ok(ok);
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_flat_string()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
