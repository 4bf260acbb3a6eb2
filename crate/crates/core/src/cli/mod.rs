//! Command-line front end: `synth`, `train`, `explain` and `eval`.

mod commands;
mod config;

pub use commands::{cmd_eval, cmd_explain, cmd_synth, cmd_train, write_manifest, Manifest, SampleFilter};
pub use config::{FoldScheme, Mode, RunConfig, SEED_ENV};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::ImageFormat;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mmxai", version, about = "Multimodal autoencoder-classifier with latent-shift explanations")]
pub struct Cli {
    /// Seed for every random choice; falls back to the config file, then MMXAI_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat JSON file of settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for folds and samples.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Train models according to a mode and fold scheme.
    Train(TrainArgs),
    /// Write per-sample explanations.
    Explain(ExplainArgs),
    /// Score every fold's test set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long = "n")]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub tabular_dim: Option<usize>,
    #[arg(long)]
    pub image_side: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<ImageFormat>,
}

fn parse_format(s: &str) -> std::result::Result<ImageFormat, String> {
    match s {
        "packed" => Ok(ImageFormat::Packed),
        "pgm" => Ok(ImageFormat::Pgm),
        _ => Err(format!("unknown image format {s:?}; expected packed or pgm")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub folds: Option<FoldScheme>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `all`, `test`, or a comma-separated list of sample ids.
    #[arg(long, default_value = "test")]
    pub sample: SampleFilter,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub occlusion_patch: Option<usize>,
}

impl Cli {
    /// Config file overlaid with every flag that was given.
    pub fn run_config(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut flags = RunConfig {
            seed: self.seed,
            workers: self.workers,
            ..RunConfig::default()
        };
        match &self.command {
            Command::Synth(a) => {
                flags.n_samples = a.n_samples;
                flags.tabular_dim = a.tabular_dim;
                flags.image_side = a.image_side;
                flags.separation = a.separation;
                flags.groups = a.groups;
                flags.missing_rate = a.missing_rate;
                flags.image_format = a.format;
            }
            Command::Train(a) => {
                flags.mode = a.mode;
                flags.folds = a.folds;
                flags.max_epochs = a.max_epochs;
                flags.batch_size = a.batch_size;
                flags.learning_rate = a.learning_rate;
                flags.augment = a.no_augment.then_some(false);
            }
            Command::Explain(a) => {
                flags.lambda_max = a.lambda_max;
                flags.step = a.step;
            }
            Command::Eval(a) => {
                flags.lambda_max = a.lambda_max;
                flags.occlusion_patch = a.occlusion_patch;
            }
        }
        file.overlay(&flags)
    }
}

/// Runs one parsed invocation; the manifest of written files goes to
/// standard output.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        if w == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let manifest = pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, &a.out, cli.force),
        Command::Train(a) => cmd_train(&cfg, &a.data, &a.out, cli.force),
        Command::Explain(a) => cmd_explain(&cfg, &a.model, &a.data, &a.out, &a.sample, a.fold, cli.force),
        Command::Eval(a) => cmd_eval(&cfg, &a.model, &a.data, &a.out, cli.force).map(|(m, _)| m),
    })?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}
