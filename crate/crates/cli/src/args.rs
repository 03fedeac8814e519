use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "actgen",
    version,
    about = "Training-aware guided generation on a procedural shapes dataset",
    arg_required_else_help = true,
    after_help = "Exit codes: 0 ok, 1 usage, 2 config, 3 runtime (including failed verification)."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines; omitted keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root seed; sets `experiment.seed` (`denoiser.seed` for train-diffusion).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Run directory for all outputs.
    #[arg(long, global = true, env = "ACTGEN_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for batched evaluation; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Extra config entry applied after the file, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the shapes pool and write the train/val/test splits.
    MakeData,
    /// Pretrain the conditional denoiser and save a checkpoint.
    TrainDiffusion,
    /// Train the classifier on real data only and save a checkpoint.
    TrainClassifier,
    /// Run the active generation loop.
    RunActgen(RunArgs),
    /// Run a comparison arm under the same budget and seeds.
    RunBaseline {
        #[arg(long, value_enum)]
        mode: BaselineMode,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write demonstration grids of each guidance variant and adversarial pairs.
    GenDemo(DemoArgs),
    /// Run the invariant suite; exits nonzero if any check fails.
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMode {
    RealOnly,
    RandomGen,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Denoiser checkpoint to use instead of pretraining one.
    #[arg(long, value_name = "PATH")]
    pub denoiser: Option<PathBuf>,

    /// Continue the interrupted run stored in DIR.
    #[arg(long, value_name = "DIR", conflicts_with = "config")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Denoiser checkpoint to use instead of pretraining one.
    #[arg(long, value_name = "PATH")]
    pub denoiser: Option<PathBuf>,

    /// Classifier checkpoint for the adversarial pairs; trained on real data when omitted.
    #[arg(long, value_name = "PATH")]
    pub classifier: Option<PathBuf>,

    /// Guide images per class.
    #[arg(long, default_value_t = 2)]
    pub guides: usize,

    /// Generations per guide and variant.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}
