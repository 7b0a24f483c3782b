use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omniseg_cli::{commands, RunConfig};
use omniseg_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "omniseg", version, about = "Single-network segmentation of partially labeled tissue classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run seed [default: seed from the config]
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its patient split
    Synth {
        #[command(flatten)]
        common: Common,
        /// Corpus directory [default: data.root from the config]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train, validating every epoch and keeping the best checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory for checkpoints and the training log
        #[arg(long, value_name = "DIR", default_value = "run")]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory for the metrics tables
        #[arg(long, value_name = "DIR", default_value = "eval")]
        out: PathBuf,
    },
    /// Segment every class on one image and merge into a label map
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// RGB image (PNG or TIFF)
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Tile stride in pixels [default: aggregate.stride from the config]
        #[arg(long, value_name = "INT")]
        stride: Option<usize>,
        /// Directory for labels, overlay and probability maps
        #[arg(long, value_name = "DIR", default_value = "aggregate")]
        out: PathBuf,
    },
    /// Report parameter counts
    Params {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Aggregate { common, .. }
            | Command::Params { common } => common,
        }
    }
}

fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let mut config = RunConfig::load(&common.config)?;
    config.apply_overrides(common.seed, common.deterministic);
    if config.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match command {
        Command::Synth { out, .. } => commands::synth(&config, out.as_deref()),
        Command::Train { out, .. } => commands::train(&config, out),
        Command::Eval { checkpoint, out, .. } => commands::eval(&config, checkpoint, out),
        Command::Aggregate {
            checkpoint,
            image,
            stride,
            out,
            ..
        } => commands::aggregate(&config, checkpoint, image, *stride, out),
        Command::Params { .. } => commands::params(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
