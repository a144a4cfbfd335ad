//! The `occlift` pipeline: synthesis, training, occlusion sweeps and the
//! downstream classification probe, one subcommand per stage. Every run
//! writes its artifacts and a single `manifest.json` into one directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

mod commands;
pub mod manifest;

pub use manifest::{RunManifest, MANIFEST_FILE};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OCCLIFT_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] occlift_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("output directory {} is not empty (pass --force to reuse it)", .0.display())]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output check failed: {0}")]
    Invariant(String),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "usage",
            CliError::OutputExists(_) | CliError::Io { .. } => "io",
            CliError::Invariant(_) => "invariant",
        }
    }

    /// Process exit status; 2 matches clap's own usage errors.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "lookup" => 3,
            "format" => 4,
            "data" => 5,
            "config" => 6,
            "numeric" => 7,
            "io" => 8,
            _ => 9,
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "category": self.category(), "message": self.to_string() } }).to_string()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "occlift", version, about = "Occlusion-guided 2D-to-3D pose lifting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a labelled synthetic dataset of paired 2D/3D sequences.
    Synth(SynthArgs),
    /// Train a lifter (guided or baseline) and write a checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint under an occlusion scheme at several levels.
    Eval(EvalArgs),
    /// Train one guided model per block count and score each over k.
    SweepSeqlen(SweepArgs),
    /// Action-classification accuracy on predicted poses under occlusion.
    Quality(QualityArgs),
    /// Re-execute the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::SweepSeqlen(_) => "sweep-seqlen",
            Command::Quality(_) => "quality",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OutArgs {
    /// Run directory receiving every artifact and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value = "h36m17")]
    pub topology: String,
    #[arg(long, default_value_t = 8)]
    pub actions: usize,
    #[arg(long, default_value_t = 25)]
    pub per_action: usize,
    #[arg(long, default_value_t = 300)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[group(required = true, multiple = false)]
pub struct Variant {
    /// Occlusion-guided input (four values per joint).
    #[arg(long)]
    #[serde(default)]
    pub guided: bool,
    /// Unguided input (two values per joint).
    #[arg(long)]
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Adam learning rate (default 1e-3).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Chunks per optimizer step (default 16).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Target frames per training chunk (default 16).
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Train on unmasked input only.
    #[arg(long)]
    #[serde(default)]
    pub no_augment: bool,
    /// Score the test split after every epoch.
    #[arg(long)]
    #[serde(default)]
    pub val: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub variant: Variant,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    None,
    Random,
    Part,
    Blackout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LevelArgs {
    #[arg(long, value_enum, default_value = "random")]
    pub scheme: SchemeArg,
    /// Missing joints per frame (random scheme).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub k: Vec<usize>,
    /// Blackout lengths in frames (blackout scheme).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub t: Vec<usize>,
    /// Body part names (part scheme).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub part: Vec<String>,
    /// Fixed blackout start frame instead of a seeded one.
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Mask seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint file or a training run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub protocol: u8,
    /// Row label (default: guided or baseline).
    #[arg(long)]
    pub name: Option<String>,
    /// Also write every generated mask.
    #[arg(long)]
    #[serde(default)]
    pub save_masks: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub blocks_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub channels: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub protocol: u8,
    /// Sweep the unguided model instead.
    #[arg(long)]
    #[serde(default)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct QualityArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pose sources as `NAME=PATH` or `PATH` (named after the directory).
    #[arg(long, required = true)]
    pub ckpt: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    /// Encoded image side length.
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    /// Frames per classified clip.
    #[arg(long, default_value_t = 100)]
    pub clip_frames: usize,
    /// Classifier training epochs.
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    /// Classifier seed.
    #[arg(long, default_value_t = 0)]
    pub classifier_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest of the run to repeat.
    pub manifest: PathBuf,
    /// Run directory for the repeat (default: the recorded one).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

/// Caps the global rayon pool at `OCCLIFT_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command and returns its run directory.
pub fn run(command: &Command) -> CliResult<PathBuf> {
    match command {
        Command::Replay(args) => {
            let manifest = RunManifest::load(&args.manifest)?;
            let mut recorded = manifest.command()?;
            if let Some(out) = &args.out {
                recorded.set_out(out.clone());
            }
            if args.force {
                recorded.set_force();
            }
            run(&recorded)
        }
        other => commands::execute(other),
    }
}

impl Command {
    fn out_args(&mut self) -> Option<&mut OutArgs> {
        match self {
            Command::Synth(a) => Some(&mut a.out),
            Command::Train(a) => Some(&mut a.out),
            Command::Eval(a) => Some(&mut a.out),
            Command::SweepSeqlen(a) => Some(&mut a.out),
            Command::Quality(a) => Some(&mut a.out),
            Command::Replay(_) => None,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        if let Some(o) = self.out_args() {
            o.out = out;
        }
    }

    pub fn set_force(&mut self) {
        if let Some(o) = self.out_args() {
            o.force = true;
        }
    }
}
