mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use asymaudit::Error;
use clap::{Args, Parser, Subcommand};

use crate::config::Config;

/// Audit 2D+ segmentation models for channel-attention asymmetry.
#[derive(Parser)]
#[command(name = "asymaudit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
    /// Allow the channel-occluded GradCAM++ method.
    #[arg(long)]
    unstable: bool,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume and mask.
    Synth(Common),
    /// Cut the volume into 2D+ samples.
    Stack(Common),
    /// Initialize a model with the configured strategy and train it.
    Train(Common),
    /// Rewrite the first-layer weights of a checkpoint.
    Surgery {
        /// random, pretrained, average, uniform-red|green|blue or uniform-<index>.
        strategy: String,
        /// Checkpoint to modify (default: the run's trained checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretrained weights: kernel .ntf, checkpoint directory or export manifest .json.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Output checkpoint directory (default: <run>/surgery-<strategy>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write saliency maps of the test split.
    Saliency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Bias and quality reports for one or more checkpoints.
    Audit {
        /// `label=checkpoint_dir` (repeatable; default: the run's checkpoint).
        #[arg(long = "model", value_name = "LABEL=DIR")]
        models: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// SVG plots of saliency maps and bias reports.
    Plot(Common),
}

impl Common {
    fn config(&self) -> asymaudit::Result<Config> {
        let mut c = Config::load(self.config.as_deref(), &self.set)?;
        if self.unstable {
            c.set("saliency.unstable", "true")?;
        }
        Ok(c)
    }

    fn exec(&self) -> asymaudit::Exec {
        if self.sequential {
            asymaudit::Exec::Sequential
        } else {
            asymaudit::Exec::Parallel
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 4,
        Error::Io { .. }
        | Error::BadMagic(_)
        | Error::SizeMismatch { .. }
        | Error::UnsupportedDtype(_)
        | Error::Malformed(_)
        | Error::Shape(_)
        | Error::OutOfRange(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => c.config().and_then(|cfg| commands::synth(&cfg, c)),
        Command::Stack(c) => c.config().and_then(|cfg| commands::stack(&cfg, c)),
        Command::Train(c) => c.config().and_then(|cfg| commands::train(&cfg, c)),
        Command::Surgery {
            strategy,
            checkpoint,
            source,
            out,
            common,
        } => common.config().and_then(|cfg| {
            commands::surgery(&cfg, common, strategy, checkpoint.as_deref(), source.as_deref(), out.as_deref())
        }),
        Command::Saliency { checkpoint, common } => {
            common.config().and_then(|cfg| commands::saliency(&cfg, common, checkpoint.as_deref()))
        }
        Command::Audit { models, common } => common.config().and_then(|cfg| commands::audit(&cfg, common, models)),
        Command::Plot(c) => c.config().and_then(|cfg| commands::plot(&cfg, c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
