//! `elder`: pre-train a toy base model, stream edits into it and inspect the
//! results.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use elder_core::config::ExperimentConfig;
use elder_core::experiment::{self, Dataset};
use elder_core::gradsuite;
use elder_core::Precision;

#[derive(Parser)]
#[command(name = "elder", version, about = "Lifelong model editing with a mixture of LoRAs")]
struct Cli {
    /// TOML experiment config; unset keys keep their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Defaults to start from when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Published)]
    preset: Preset,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Published hyperparameters on the desk-scale host.
    Published,
    /// Calibrated desk-scale settings.
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the base model and write vocab.tsv and base.ckpt.
    Pretrain,
    /// Run the edit stream and write metrics, events, codes and the edited checkpoint.
    Edit,
    /// Recompute metrics from edited.ckpt and codes.bin.
    Eval,
    /// Finite-difference check of every op and training objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rewrite codes.csv from codes.bin; optionally dump per-input codes.
    Codes {
        /// Also write the allocation code of every edit text and task prompt here.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Write the synthetic dataset as JSONL.
    Synth {
        /// Target directory; defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut cfg = match cli.preset {
                Preset::Published => ExperimentConfig::default(),
                Preset::Toy => ExperimentConfig::toy(),
            };
            cfg.apply_env()?;
            cfg
        }
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.model.precision {
            Precision::F64 => experiment::$f::<f64>($($arg),*),
            Precision::F32 => experiment::$f::<f32>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Gradcheck { seed } = cli.command {
        let cases = gradsuite::full_suite(seed)?;
        for c in &cases {
            println!(
                "{:<32} checked {:>6}  max rel {:.3e}  max abs {:.3e}",
                c.name, c.report.checked, c.report.max_rel_error, c.report.max_abs_error
            );
        }
        let worst = gradsuite::worst(&cases).map_or(0.0, |c| c.report.max_rel_error);
        println!("max relative error {worst:.3e}");
        if worst >= 1e-4 {
            bail!("gradient check failed: {worst:.3e} >= 1e-4");
        }
        return Ok(());
    }

    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Pretrain => {
            let data = Dataset::prepare(&cfg)?;
            let accuracy = match cfg.model.precision {
                Precision::F64 => experiment::pretrain_base::<f64>(&cfg, &data)?.2.accuracy,
                Precision::F32 => experiment::pretrain_base::<f32>(&cfg, &data)?.2.accuracy,
            };
            println!("pre-trained on {} items, corpus accuracy {accuracy:.4}", data.corpus.len());
        }
        Command::Edit => {
            let report = with_precision!(cfg, run_edit(&cfg))?;
            if let Some(last) = report.checkpoints.last() {
                println!(
                    "{} edits: reliability {:.4} generalization {} retention {:.4} params {}",
                    last.edits_seen,
                    last.reliability,
                    last.generalization.map_or("n/a".into(), |g| format!("{g:.4}")),
                    last.retention,
                    last.param_count
                );
            }
            println!("reports in {}", cfg.out_dir.display());
        }
        Command::Eval => {
            let report = with_precision!(cfg, run_eval(&cfg))?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.base_intact {
                bail!("edited checkpoint does not carry the stored base weights");
            }
        }
        Command::Codes { inputs } => {
            let n = with_precision!(cfg, dump_codes(&cfg, inputs.as_deref()))?;
            println!("{n} edit codes written to {}", cfg.out_dir.join(experiment::CODES_CSV).display());
        }
        Command::Synth { dir } => {
            let dir = dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let data = experiment::write_synthetic(&cfg, &dir)?;
            println!(
                "{} edits, {} task inputs, {} corpus items in {}",
                data.edits.len(),
                data.tasks.len(),
                data.corpus.len(),
                dir.display()
            );
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
