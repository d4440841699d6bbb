use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod ablate;
mod commands;

use commands::Failure;

#[derive(Parser)]
#[command(name = "glimpse-pad", version, about = "Global/local hard-attention presentation attack detection")]
struct Cli {
    /// Override a config key, e.g. `--set train.seed=3` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images, manifest and split files).
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, writing checkpoints, the epoch log and dev scores.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `1` stops after backbone pretraining; `2` needs `--stage1-checkpoint`.
        #[arg(long, value_parser = ["1", "2", "all"], default_value = "all")]
        stage: String,
        /// Pretrained backbone to start stage 2 from.
        #[arg(long)]
        stage1_checkpoint: Option<PathBuf>,
    },
    /// Score a data set and report EER, HTER, APCER/BPCER/ACER.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `dev`, `test`, or a manifest CSV path.
        #[arg(long, default_value = "test")]
        data: String,
        /// Threshold-selection set (`train`, `dev`, `test`, or a manifest CSV path).
        #[arg(long)]
        dev: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis, holding everything else fixed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of branch, selector, patch_size, steps, scheme, fusion.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; defaults to the full set for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one episode's glimpse windows and write its confidence series.
    VizTraj {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Upscaling factor of the overlay.
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Seed of the evaluation generator (used by the random selector).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Class activation map of the global branch for one image.
    VizCam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and multiply-accumulate counts of a checkpoint or config.
    ReportCompute {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also time this many deterministic episodes.
        #[arg(long)]
        measure: Option<usize>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let o = &cli.overrides;
    match cli.command {
        Command::Synth { config, out } => commands::synth(&config, o, out),
        Command::Train {
            config,
            out,
            stage,
            stage1_checkpoint,
        } => commands::train(&config, o, out, &stage, stage1_checkpoint),
        Command::Eval {
            config,
            checkpoint,
            data,
            dev,
            out,
        } => commands::eval(&config, o, &checkpoint, &data, dev.as_deref(), out),
        Command::Ablate {
            config,
            axis,
            values,
            out,
        } => ablate::run(&config, o, axis, values, out),
        Command::VizTraj {
            checkpoint,
            image,
            out,
            scale,
            seed,
        } => commands::viz_traj(&checkpoint, &image, &out, scale, seed),
        Command::VizCam { checkpoint, image, out } => commands::viz_cam(&checkpoint, &image, &out),
        Command::ReportCompute {
            checkpoint,
            config,
            measure,
            out,
        } => commands::report_compute(checkpoint.as_deref(), config.as_deref(), o, measure, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
