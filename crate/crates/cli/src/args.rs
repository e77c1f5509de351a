use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gpat", version, about = "Part assembly by target segmentation")]
pub struct Cli {
    /// Worker threads for sample-parallel stages (default: available parallelism).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset file and its manifest.
    GenData(GenDataArgs),
    /// Train a segmentation model on a dataset file.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients of a fresh model.
    GradCheck(GradCheckArgs),
    /// Evaluate a checkpoint (or ground-truth segmentation) on a dataset split.
    Eval(EvalArgs),
    /// Segment and assemble a single sample.
    Assemble(AssembleArgs),
    /// Write a sample's target, parts and ground-truth assembly as PLY files.
    ExportPly(ExportPlyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelPreset {
    Tiny,
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainPreset {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Gpat,
    VanillaTf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RotationArg {
    Off,
    Random,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    Unseen,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Architecture preset.
    #[arg(long, value_enum, default_value = "desk")]
    pub model_preset: ModelPreset,
    /// JSON model config; overrides --model-preset.
    #[arg(long, value_name = "FILE")]
    pub model_config: Option<PathBuf>,
    /// Layer type of the transformer.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Comma-separated templates for train/val/test (table4, stool, lamp, shelf, chair, tframe).
    #[arg(long, default_value = "table4,stool,lamp,shelf,chair,tframe")]
    pub templates: String,
    /// Number of samples over --templates.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Comma-separated templates withheld from training.
    #[arg(long, default_value = "")]
    pub unseen_templates: String,
    /// Number of samples over --unseen-templates.
    #[arg(long, default_value_t = 0)]
    pub unseen_count: usize,
    /// Points per target cloud.
    #[arg(long, default_value_t = 2560)]
    pub points_target: usize,
    /// Points per part cloud.
    #[arg(long, default_value_t = 512)]
    pub points_part: usize,
    /// Fraction of samples stored with non-exact parts.
    #[arg(long, default_value_t = 0.0)]
    pub nonexact_fraction: f64,
    /// Fraction of seen samples in the validation split.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Fraction of seen samples in the test split.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset file; the manifest is written next to it as <FILE>.manifest.json.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file from gen-data.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Output directory for checkpoint.bin, its sidecar and train_log.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Optimizer and schedule preset.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: TrainPreset,
    /// Number of epochs (total, including resumed ones).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Samples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Rotation augmentation of training targets.
    #[arg(long, value_enum)]
    pub rotation: Option<RotationArg>,
    /// Probability of training on a non-exact version of each exact sample.
    #[arg(long)]
    pub nonexact_fraction: Option<f64>,
    /// Largest equivalence class searched by enumeration.
    #[arg(long)]
    pub permutation_cap: Option<usize>,
    /// Checkpoint cadence in epochs (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from this checkpoint; model and training configs come from its sidecar.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Architecture preset.
    #[arg(long, value_enum, default_value = "tiny")]
    pub model_preset: ModelPreset,
    /// Layer type of the transformer.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Seed for initialization, inputs and coordinate choice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full per-coordinate report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Use ground-truth segmentation instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Dataset file.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Part-accuracy chamfer threshold.
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    /// Segments with fewer points are dropped and reassigned.
    #[arg(long, default_value_t = 5)]
    pub min_points: usize,
    /// Seed for random poses and non-exact substitutes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Comma list of canonical, random-pose, exact, nonexact; a missing dimension means both.
    #[arg(long, default_value = "canonical,random-pose,exact,nonexact")]
    pub regime: String,
    /// Output directory for metrics.json, metrics.csv and bottleneck.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Also write per-sample PLY files into this directory.
    #[arg(long, value_name = "DIR")]
    pub export_ply: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Sample id from the manifest.
    #[arg(long)]
    pub sample: String,
    /// A single regime, e.g. canonical,exact.
    #[arg(long, default_value = "canonical,exact")]
    pub regime: String,
    /// Output directory for assembly.json and PLY files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportPlyArgs {
    /// Dataset file.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Sample id from the manifest.
    #[arg(long)]
    pub sample: String,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
