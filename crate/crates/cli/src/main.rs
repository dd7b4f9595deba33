use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neusample::pipeline::PipelineKind;
use neusample::{Error, ErrorKind};

mod commands;

/// Train, render, extract and evaluate NeuSample and hierarchical radiance-field pipelines.
#[derive(Parser, Debug)]
#[command(name = "neusample", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration file (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no configuration file is found: desk or full.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Integer image downscale factor applied when loading a scene.
    #[arg(long, global = true)]
    pub downscale: Option<usize>,
    /// Scene override: `preset:<name>`, `toy:<spec.toml>` or `blender:<dir>`. Relative paths
    /// fall back to $NEUSAMPLE_DATA.
    #[arg(long, global = true)]
    pub scene: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a pipeline from scratch or resume from a checkpoint.
    Train {
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, value_parser = parse_kind)]
        pipeline: Option<PipelineKind>,
        /// Samples per ray (NeuSample) or total radiance evaluations (hierarchical).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps between checkpoints; 0 keeps only the final one.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Render views of a trained pipeline to PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test`, `train`, `all`, `spiral:<count>` or a comma-separated list of view indices.
        #[arg(long, default_value = "test")]
        views: String,
        /// Write the per-sample record stream of pixel row `ROW` (or one pixel, `ROW:COL`) of
        /// the first rendered view.
        #[arg(long, value_name = "ROW[:COL]")]
        dump_samples: Option<String>,
    },
    /// Shrink a NeuSample checkpoint to fewer samples per ray.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_e: Option<usize>,
        #[arg(long, overrides_with = "no_depth_boost")]
        depth_boost: bool,
        #[arg(long)]
        no_depth_boost: bool,
        #[arg(long)]
        finetune_iters: Option<u64>,
    },
    /// Score checkpoints against the dataset (or against rendered PNGs).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint evaluated side by side.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        views: String,
        /// Directory of `{view:04}.png` references replacing the dataset images.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Time rendering against the hierarchical baseline and report cost ratios.
    Bench {
        /// Trained pipeline; without it the configured architecture is randomly initialized.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Number of rays timed (taken from the first test view).
        #[arg(long, default_value_t = 1024)]
        rays: usize,
    },
    /// Write a procedural scene as a Blender-format dataset.
    GenToy {
        /// Built-in scene: default or occluder.
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// Scene spec file.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<PipelineKind, String> {
    match s {
        "neusample" => Ok(PipelineKind::Neusample),
        "hierarchical" | "hierarchical-baseline" | "baseline" => Ok(PipelineKind::Hierarchical),
        other => Err(format!("unknown pipeline {other:?}; expected neusample or hierarchical")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
