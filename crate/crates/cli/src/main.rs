use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mcfa::cascade::{predict, CascadeThresholds};
use mcfa::checkpoint;
use mcfa::data::load_image;
use mcfa::gradcheck::{gradcheck, GradcheckOptions};
use mcfa::synth::{self, SynthOptions};
use mcfa::trainer::{self, load_dataset, EpochRecord, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "mcfa", version, about = "Cascaded multi-task CNN for facial attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write checkpoints, history and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Suppress the per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Attribute accuracy of a checkpoint through the cascade.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        ts: f64,
        #[arg(long, default_value_t = 0.5)]
        tm: f64,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train all four task variants and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run the cascade on one image and print the result as JSON.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        ts: f64,
        #[arg(long, default_value_t = 0.5)]
        tm: f64,
    },
    /// Generate a labeled synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of labeled attributes (1 to 8).
        #[arg(long, default_value_t = 4)]
        attributes: usize,
        /// Side of the written images in pixels.
        #[arg(long, default_value_t = 64)]
        side: u32,
        /// Only attribute records, no face/non-face/landmark-only ones.
        #[arg(long)]
        attributes_only: bool,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn epoch_line(r: &EpochRecord, total: usize) -> String {
    format!(
        "epoch {}/{} lr={:.3e} loss={:.6}",
        r.epoch, total, r.learning_rate, r.loss.joint
    )
}

fn thresholds(ts: f64, tm: f64) -> Result<CascadeThresholds> {
    Ok(CascadeThresholds::new(ts, tm)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            manifest,
            out,
            quiet,
        } => {
            let cfg = read_config(&config)?;
            let samples = load_dataset(&manifest, &cfg.model)?;
            let epochs = cfg.epochs;
            let outcome = trainer::train_with_progress(&cfg, &samples, Some(&out), &mut |r| {
                if !quiet {
                    eprintln!("{}", epoch_line(r, epochs));
                }
            })?;
            print!("{}", outcome.metrics.table(&synth::ATTRIBUTE_NAMES));
            print!("{}", outcome.metrics.key_values());
            println!("checkpoint={}", out.join(trainer::FINAL_CHECKPOINT).display());
        }
        Command::Eval {
            model,
            manifest,
            ts,
            tm,
        } => {
            let model = checkpoint::load(&model)?;
            let samples = load_dataset(&manifest, &model.config)?;
            let m = trainer::evaluate(&model, &samples, thresholds(ts, tm)?, Default::default())?;
            print!("{}", m.table(&synth::ATTRIBUTE_NAMES));
            print!("{}", m.key_values());
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck(&GradcheckOptions {
                seed,
                ..Default::default()
            })?;
            print!("{}", report.table());
            println!("checked={}", report.checked());
            println!("max_rel_error={:e}", report.max_rel_error());
            if !report.passed() {
                let names: Vec<_> = report.failures().iter().map(|g| g.group.as_str()).collect();
                eprintln!("gradient check failed in: {}", names.join(", "));
                return Ok(ExitCode::FAILURE);
            }
            println!("gradcheck=pass");
        }
        Command::Ablate {
            config,
            manifest,
            out,
            quiet,
        } => {
            let cfg = read_config(&config)?;
            let samples = load_dataset(&manifest, &cfg.model)?;
            let epochs = cfg.epochs;
            let report = trainer::ablate_with_progress(&cfg, &samples, Some(&out), &mut |v: Variant, r| {
                if !quiet {
                    eprintln!("{} {}", v.name(), epoch_line(r, epochs));
                }
            })?;
            print!("{}", report.table());
            for v in &report.variants {
                println!("{}.average_accuracy={}", v.variant.name(), v.metrics.average_accuracy);
            }
        }
        Command::Predict { model, image, ts, tm } => {
            let model = checkpoint::load(&model)?;
            let input = load_image(&image, &model.config)?;
            let result = predict(&model, &input, thresholds(ts, tm)?)?;
            println!("{}", result.to_json_line());
        }
        Command::Synth {
            out,
            n,
            seed,
            attributes,
            side,
            attributes_only,
        } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let mut opts = if attributes_only {
                SynthOptions::attributes_only(attributes)
            } else {
                SynthOptions {
                    num_attributes: attributes,
                    ..Default::default()
                }
            };
            opts.source_side = side;
            let items = synth::generate(n, seed, &opts)?;
            let manifest = synth::write(&items, &out, &opts)?;
            println!("manifest={}", manifest.display());
            println!("records={}", items.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
