mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segdiff_core::Error;

/// Environment variable naming the default corpus directory.
pub const DATA_ENV: &str = "SEGDIFF_DATA";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "segdiff", version, about = "Diffusion-based binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat TOML settings file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for independent runs or images.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Corpus directory holding `manifest.json`.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image and mask corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Samples per split.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw ensemble segmentations for images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files; when absent, every image of `--split` in `--data`.
        #[arg(long, num_args = 1..)]
        image: Vec<PathBuf>,
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ensemble: Option<usize>,
    },
    /// Score segmentations of a split against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long, conflicts_with = "predictions")]
        oracle: bool,
        /// Directory of `<id>.png` or `<id>/fused.png` masks to score.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ensemble: Option<usize>,
    },
    /// Fuse binary masks of one image into a consensus.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Mask PNGs with values 0 and 255.
        #[arg(required = true)]
        masks: Vec<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        prior: Option<f64>,
    },
    /// Train and score architecture variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Synth { common, count } => commands::synth(&common, count, &argv),
        Command::Train {
            common,
            data,
            max_steps,
            epochs,
        } => commands::train(&common, &data.data, max_steps, epochs, &argv),
        Command::Sample {
            common,
            checkpoint,
            image,
            data,
            split,
            steps,
            ensemble,
        } => commands::sample(&common, &checkpoint, &image, data.as_deref(), &split, steps, ensemble, &argv),
        Command::Eval {
            common,
            data,
            split,
            checkpoint,
            oracle,
            predictions,
            steps,
            ensemble,
        } => commands::eval(
            &common,
            &data.data,
            &split,
            checkpoint.as_deref(),
            oracle,
            predictions.as_deref(),
            steps,
            ensemble,
            &argv,
        ),
        Command::Fuse {
            common,
            masks,
            method,
            prior,
        } => commands::fuse(&common, &masks, method.as_deref(), prior, &argv),
        Command::Ablate {
            common,
            data,
            seeds,
            variants,
            max_steps,
        } => commands::ablate(&common, &data.data, seeds, variants, max_steps, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
