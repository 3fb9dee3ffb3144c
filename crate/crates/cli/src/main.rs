use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "slr",
    version,
    about = "Skeleton-based isolated sign recognition"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Keypoint dimensionality; overrides `[graph] mode`.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Slgcn,
    Sstcn,
    Gem,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Fixed,
    Gem,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic keypoint dataset, one file per sample.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
    /// Convert pose-estimator JSON lines into a keypoint file.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1920.0)]
        width: f64,
        #[arg(long, default_value_t = 1080.0)]
        height: f64,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        signer: Option<String>,
    },
    /// Keypoint files -> four stream tensors (slgcn) or heatmap features (sstcn).
    Prepare {
        /// Keypoint files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Model::Slgcn)]
        model: Model,
        /// Apply the configured training-time sampling and augmentation.
        #[arg(long)]
        augment: bool,
    },
    /// Train a model and write a checkpoint plus a metrics report.
    Train {
        #[arg(long, value_enum)]
        model: Model,
        /// One stream or feature file, or the logit files for GEM.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step; the learning-rate schedule still spans
        /// `[train] steps`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Eval-mode logits for a data file.
    Infer {
        /// Checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse aligned logit files.
    Fuse {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FusionMode::Fixed)]
        fusion: FusionMode,
        /// Comma-separated weights; overrides `[fusion] weights`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        weights: Option<Vec<f64>>,
        /// GEM checkpoint; without one the freshly initialized model is used.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-modality weight sensitivity table.
    Sweep {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Output TSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// `start:stop:step` or a comma list; overrides `[fusion] grid`.
        #[arg(long)]
        grid: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth {
            out,
            classes,
            samples,
            frames,
            noise,
        } => commands::synth(g, &out, classes, samples, frames, noise),
        Command::Import {
            input,
            out,
            width,
            height,
            id,
            label,
            signer,
        } => commands::import(&input, &out, (width, height), id, label, signer),
        Command::Prepare {
            input,
            out,
            model,
            augment,
        } => commands::prepare(g, &input, &out, model, augment),
        Command::Train {
            model,
            data,
            out,
            resume,
            until,
        } => commands::train(g, model, &data, &out, resume.as_deref(), until),
        Command::Infer { model, data, out } => commands::infer(&model, &data, &out),
        Command::Fuse {
            data,
            out,
            fusion,
            weights,
            model,
        } => commands::fuse(g, &data, &out, fusion, weights, model.as_deref()),
        Command::Sweep {
            data,
            out,
            weights,
            grid,
        } => commands::sweep(g, &data, out.as_deref(), weights, grid),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
