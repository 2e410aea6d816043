//! `tfcl`: run experiments from a TOML configuration.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 data error,
//! 4 numeric error, 5 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tfcl::contrastive::Stream;
use tfcl::ErrorClass;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "tfcl", version, about = "Dual-stream contrastive learning for accelerometer activity recognition")]
struct Cli {
    /// Worker threads for fold-, batch- and sweep-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `--set pretrain.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamArg {
    Signal,
    Scalogram,
    Both,
}

impl StreamArg {
    pub fn streams(self) -> Vec<Stream> {
        match self {
            StreamArg::Signal => vec![Stream::Signal],
            StreamArg::Scalogram => vec![Stream::Scalogram],
            StreamArg::Both => vec![Stream::Signal, Stream::Scalogram],
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus of `data.synth` as CSV.
    Synth(Common),
    /// Load and window the corpus and summarize it.
    Ingest(Common),
    /// Write the scalogram of one window as PNG and binary.
    Cwt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write two augmented views of one window for both streams.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Self-supervised pretraining on the training subjects of one fold.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stream: StreamArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Pretrain on every subject, test subjects included.
        #[arg(long)]
        all_subjects: bool,
    },
    /// Fine-tune HAR heads on pretrained encoders and score one fold.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stream: StreamArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Directory holding `pretrain-<stream>` checkpoints; defaults to the
        /// output directory.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Cross-validate the full pipeline and write a metrics report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reuse `pretrain-<stream>` checkpoints from this directory in every
        /// fold instead of pretraining per fold.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Pretrain on `transfer.pretrain`, evaluate on `data`.
    Transfer(Common),
    /// Write encoder embeddings of every window as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Pretraining or HAR checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    match commands::run(&cli.command, cli.jobs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(e.class()))
        }
    }
}
