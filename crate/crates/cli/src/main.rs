mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "signbench", version, about = "Sign-language translation and subtitle alignment from pose and lip features")]
pub struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Slt,
    Ssa,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus with known alignments.
    SynthData {
        #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(2..))]
        classes: u64,
        /// Continuous videos.
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        isolated_per_class: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete configuration document.
    PrintConfig {
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
    },
    /// Pretrain the pose and lip backbones on isolated signs.
    TrainIslr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three pretraining stages from an ISLR checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue multitask training from a pretraining checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a span of frames.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `config.json` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `tokenizer.json` beside the checkpoint.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        lip: PathBuf,
        /// First frame, inclusive.
        #[arg(long)]
        start: usize,
        /// Last frame, inclusive.
        #[arg(long)]
        end: usize,
        #[arg(long, default_value = "bfi")]
        lang: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Print the prompt and generated tokens to stderr.
        #[arg(long)]
        debug: bool,
    },
    /// Re-time audio-aligned subtitles to the signing.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        lip: PathBuf,
        /// Audio-aligned SRT or VTT.
        #[arg(long)]
        subs: PathBuf,
        /// Output SRT or VTT, chosen by extension.
        #[arg(long)]
        out: PathBuf,
        /// JSON report; defaults to the output path with a `.json` extension.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = signbench::ssa::DEFAULT_BETA)]
        beta: f64,
        #[arg(long)]
        debug: bool,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        /// Video length in frames; defaults to the last cue end.
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
