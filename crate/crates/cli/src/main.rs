use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lsgmer_core::data_io::{load_dataset, synth_generate, Split, SynthConfig};
use lsgmer_core::train::report::{read_metrics, write_report};
use lsgmer_core::train::{gradcheck, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "lsgmer",
    version,
    about = "Label-signal-guided audio/text emotion recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML file with training hyperparameters.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        disable_ma: bool,
        #[arg(long)]
        disable_joo: bool,
        #[arg(long)]
        disable_lsma: bool,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write metrics and confusion tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset (manifest plus feature files).
    Synth {
        /// TOML file with generator settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients of the full objective on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rewrite the report tables from a metrics.json file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(
    manifest: &Path,
    config: &Path,
    flags: [bool; 3],
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    let [disable_ma, disable_joo, disable_lsma] = flags;
    cfg.disable_ma |= disable_ma;
    cfg.disable_joo |= disable_joo;
    cfg.disable_lsma |= disable_lsma;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = load_dataset(manifest)?;
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let log_path = out.join("train_log.txt");
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut trainer = Trainer::new(cfg, &dataset)?;
    let mut io_err = None;
    trainer.fit(&dataset, |l| {
        println!("{l}");
        if let Err(e) = writeln!(log, "{l}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing training log");
    }
    let ckpt = out.join("checkpoint.lsgc");
    trainer.checkpoint().save(&ckpt)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, split: Split, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(manifest)?;
    let metrics = Trainer::from_checkpoint(&ckpt)?.evaluate(&dataset, split)?;
    write_report(&metrics, out)?;
    println!(
        "{split}: {} samples  WA {:.4}  UA {:.4}  WF1 {:.4}",
        metrics.total, metrics.wa, metrics.ua, metrics.wf1
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            manifest,
            config,
            disable_ma,
            disable_joo,
            disable_lsma,
            seed,
            out,
        } => train(
            &manifest,
            &config,
            [disable_ma, disable_joo, disable_lsma],
            seed,
            &out,
        )?,
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => eval(&checkpoint, &manifest, split, &out)?,
        Command::Synth { config, out } => {
            let cfg = SynthConfig::load(&config)?;
            let path = synth_generate(&cfg, &out)?;
            println!("manifest written to {}", path.display());
        }
        Command::Gradcheck { seed } => {
            let summary = gradcheck::run(seed)?;
            println!("{summary}");
            if !summary.passes() {
                println!(
                    "gradient check FAILED for: {}",
                    summary.failing_groups().join(", ")
                );
                return Ok(ExitCode::FAILURE);
            }
            println!("gradient check passed");
        }
        Command::Report { metrics, out } => {
            let m = read_metrics(&metrics)?;
            for p in write_report(&m, &out)? {
                println!("{}", p.display());
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
