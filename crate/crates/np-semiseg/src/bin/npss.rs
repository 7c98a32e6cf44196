//! Thin command-line front end; all logic lives in the library.

use clap::{Parser, Subcommand};
use np_semiseg::cli;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "npss",
    about = "Probabilistic semantic segmentation with a neural-process head: \
             synthetic data, semi-supervised training, uncertainty evaluation"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset, writing checkpoint + logs
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// continue from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate mIoU/PAvPU on the val split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// crop | slide
        #[arg(long, default_value = "crop")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render prediction and uncertainty images for one input
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Compare NP vs MC-dropout uncertainty cost
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        /// comma-separated pass counts, e.g. 1,2,5,10
        #[arg(long, default_value = "1,2,5,10", value_delimiter = ',')]
        t: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match &args.command {
        Command::Generate { config, out } => cli::cmd_generate(config, out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cli::cmd_train(config, data, out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            mode,
            out,
        } => cli::EvalMode::parse(mode)
            .and_then(|m| cli::cmd_eval(checkpoint, data, m, out)),
        Command::Render {
            checkpoint,
            image,
            out_prefix,
        } => cli::cmd_render(checkpoint, image, out_prefix),
        Command::Benchmark {
            checkpoint,
            t,
            repeats,
            out,
        } => cli::cmd_benchmark(checkpoint, t, *repeats, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
