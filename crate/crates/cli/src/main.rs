//! `dvae`: preprocess audio corpora, train and evaluate dynamical VAEs, and
//! compare model families on the analysis-resynthesis benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dvae::evaluation::LatentChoice;
use dvae::{DvaeError, ModelKind};

use commands::PhaseChoice;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "dvae", version = config::REVISION, about = "Dynamical variational autoencoders for speech spectra")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recon {
    Mean,
    Sample,
}

impl From<Recon> for LatentChoice {
    fn from(r: Recon) -> Self {
        match r {
            Recon::Mean => LatentChoice::PosteriorMean,
            Recon::Sample => LatentChoice::PosteriorSample,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic speech-like corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1800.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute and cache spectrograms for every manifest item.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Build the model, print parameter counts and exit.
        #[arg(long)]
        dry_run: bool,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a trained model on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        recon: Option<Recon>,
    },
    /// Sample spectrograms (and waveforms) from a trained model.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Frames per sequence.
        #[arg(long, default_value_t = 150)]
        frames: usize,
        /// Number of sequences.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value_t = PhaseChoice::Random)]
        phase: PhaseChoice,
    },
    /// Train and evaluate several models from one configuration.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated model ids (defaults to the config's list).
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        #[arg(long)]
        dry_run: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, seconds, seed } => commands::synth(&out, seconds, seed),
        Command::Preprocess { config } => commands::preprocess(&RunConfig::load(&config, None)?),
        Command::Train {
            config,
            seed,
            dry_run,
            resume,
        } => commands::train(&RunConfig::load(&config, seed)?, dry_run, resume),
        Command::Eval {
            config,
            checkpoint,
            seed,
            recon,
        } => commands::eval(&RunConfig::load(&config, seed)?, checkpoint.as_deref(), recon.map(Into::into)).map(|_| ()),
        Command::Generate {
            config,
            checkpoint,
            seed,
            frames,
            count,
            phase,
        } => commands::generate(&RunConfig::load(&config, seed)?, checkpoint.as_deref(), frames, count, phase),
        Command::Compare {
            config,
            seed,
            models,
            dry_run,
        } => commands::compare(&RunConfig::load(&config, seed)?, models, dry_run),
    }
}

/// 2: training aborted on a non-finite loss; 3: configuration mismatch;
/// 4: empty input; 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<DvaeError>()) {
        Some(DvaeError::NonFinite { .. }) => 2,
        Some(DvaeError::HashMismatch { .. }) => 3,
        Some(DvaeError::EmptyInput(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
