use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semsynth::checkpoint::Checkpoint;
use semsynth::config::RunConfig;
use semsynth::data::{load_pair, save_dataset, save_image_png};
use semsynth::editing;
use semsynth::error::Result;
use semsynth::model::Models;
use semsynth::train::{evaluate, train, train_diversity};
use semsynth::verify;

#[derive(Parser)]
#[command(name = "semsynth", about = "Semantic image synthesis with cross-attention style control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with `key = value` lines over the built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::desk(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                semsynth::error::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the reconstruction phase and write a checkpoint
    Train {
        /// Run directory for config, metrics and the checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Truncate each epoch after this many optimizer steps
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the noise-to-style mapping network on a frozen checkpoint
    TrainDiversity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Reconstruction metrics on held-out scenes, printed as JSON
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
    /// Write a procedural dataset as image/mask PNG pairs
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Shorthand for `--set seed=N`
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct an image from its own mask and encoded styles
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the style of selected classes with a reference image's style
    StyleTransfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        ref_image: PathBuf,
        #[arg(long)]
        ref_mask: PathBuf,
        /// Comma-separated class indices
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap the mask embedding of selected classes for a reference mask's
    ShapeTransfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        ref_mask: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend the mask embeddings of selected classes between two masks
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        mask2: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every op and composite block
    GradCheck,
}

fn load_models(path: &PathBuf) -> Result<Models<f32>> {
    Models::from_checkpoint(&Checkpoint::load(path)?)
}

fn save_sample(
    models: &Models<f32>,
    sample: &semsynth::generator::GeneratedSample<f32>,
    out: &PathBuf,
) -> Result<()> {
    let r = models.config.resolution;
    save_image_png(out, &Models::image_f32(sample), r, r)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            out,
            max_steps,
            config,
        } => {
            let cfg = config.resolve()?;
            let result = train::<f32>(cfg, Some(&out), max_steps)?;
            if let Some(last) = result.records.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::TrainDiversity {
            checkpoint,
            out,
            epochs,
            max_steps,
        } => {
            let mut models = load_models(&checkpoint)?;
            let records = train_diversity(&mut models, epochs, Some(&out), max_steps)?;
            if let Some(last) = records.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Eval {
            checkpoint,
            samples,
        } => {
            let models = load_models(&checkpoint)?;
            let record = evaluate(&models, samples)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        Command::SynthData {
            out,
            count,
            seed,
            config,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            save_dataset(&out, &cfg.scene_config(), count)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Reconstruct {
            checkpoint,
            image,
            mask,
            out,
        } => {
            let models = load_models(&checkpoint)?;
            let (img, m) = load_pair(&image, &mask, models.config.num_classes)?;
            let sample = editing::reconstruct(&models, &img, &m)?;
            save_sample(&models, &sample, &out)?;
        }
        Command::StyleTransfer {
            checkpoint,
            image,
            mask,
            ref_image,
            ref_mask,
            classes,
            out,
        } => {
            let models = load_models(&checkpoint)?;
            let c = models.config.num_classes;
            let (img, m) = load_pair(&image, &mask, c)?;
            let (rimg, rm) = load_pair(&ref_image, &ref_mask, c)?;
            let sample = editing::transfer_style(&models, &img, &m, &rimg, &rm, &classes)?;
            save_sample(&models, &sample, &out)?;
        }
        Command::ShapeTransfer {
            checkpoint,
            image,
            mask,
            ref_mask,
            classes,
            out,
        } => {
            let models = load_models(&checkpoint)?;
            let c = models.config.num_classes;
            let (img, m) = load_pair(&image, &mask, c)?;
            // the reference mask rides along with the target image
            let (_, rm) = load_pair(&image, &ref_mask, c)?;
            let sample = editing::transfer_shape(&models, &img, &m, &rm, &classes)?;
            save_sample(&models, &sample, &out)?;
        }
        Command::Interp {
            checkpoint,
            image,
            mask,
            mask2,
            classes,
            alpha,
            out,
        } => {
            let models = load_models(&checkpoint)?;
            let c = models.config.num_classes;
            let (img, m1) = load_pair(&image, &mask, c)?;
            let (_, m2) = load_pair(&image, &mask2, c)?;
            let sample = editing::interpolate_shape(&models, &img, &m1, &m2, &classes, alpha)?;
            save_sample(&models, &sample, &out)?;
        }
        Command::GradCheck => {
            let reports = verify::run_all()?;
            let mut ok = true;
            for r in &reports {
                println!("{}", r.summary());
                ok &= r.passed;
            }
            println!(
                "{}/{} checks passed",
                reports.iter().filter(|r| r.passed).count(),
                reports.len()
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
