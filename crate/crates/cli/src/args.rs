use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use radformer_core::roi::Binarization;

#[derive(Parser, Debug)]
#[command(name = "radformer", version, about = "Global-local attention classifier for grayscale ultrasound images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one stage or all three, optionally with patient-level k-fold
    /// cross-validation.
    Train(TrainArgs),
    /// Score a trained checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Compare ROI binarization strategies against annotated boxes.
    RoiBench(RoiBenchArgs),
    /// Build the lexicon to feature-id map from lexicon-labelled images.
    Map(MapArgs),
    /// Explain predictions: top features, lexicons, activation maps,
    /// attention scores.
    Explain(ExplainArgs),
    /// Write a synthetic glyph corpus with its manifest.
    Synth(SynthArgs),
    /// Print the backbone preset table as JSON.
    Presets(PresetsArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Global,
    Local,
    Full,
    All,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long, default_value = "toy", value_parser = ["paper-50", "paper-34", "paper-18", "toy"])]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// ROI strategy used by the local branch.
    #[arg(long, default_value = "otsu", value_parser = parse_binarization)]
    pub binarize: Binarization,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageArg,
    /// Patient-level folds; without it the model trains on every image.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run folds concurrently (results are still merged in fold order).
    #[arg(long, requires = "folds")]
    pub parallel_folds: bool,
    /// Resume from this checkpoint (single run) or warm-start every fold
    /// from it (cross-validation).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_binarization)]
    pub binarize: Option<Binarization>,
}

#[derive(Args, Debug)]
pub struct RoiBenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate this checkpoint on every fold instead of training per fold.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Strategies to compare; repeat the flag. Defaults to otsu, fixed:120,
    /// hysteresis:120:50 and naive.
    #[arg(long = "strategy", value_parser = parse_binarization)]
    pub strategies: Vec<Binarization>,
    #[arg(long)]
    pub parallel_folds: bool,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightArg {
    Gradient,
    GradientXActivation,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Fusion,
    Local,
}

#[derive(Args, Debug, Clone)]
#[group(id = "model", required = true, multiple = false)]
pub struct ModelSource {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the hand-wired glyph detector instead of a trained model.
    #[arg(long)]
    pub rig: bool,
}

#[derive(Args, Debug, Clone)]
pub struct WeightArgs {
    /// Fraction of the top weight within which features count as top.
    #[arg(long, default_value_t = radformer_core::explainer::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value = "gradient")]
    pub weights: WeightArg,
    #[arg(long, value_enum, default_value = "fusion")]
    pub head: HeadArg,
    /// Seed of the glyph rig's channel assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Images to explain; repeat the flag.
    #[arg(long = "image", required_unless_present = "manifest")]
    pub images: Vec<PathBuf>,
    /// Explain every image of a manifest.
    #[arg(long, conflicts_with = "images")]
    pub manifest: Option<PathBuf>,
    /// Lexicon map written by `radformer map`.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub patients: usize,
    /// Images per patient as `min:max`.
    #[arg(long, default_value = "2:4", value_parser = parse_range)]
    pub images_per_patient: (usize, usize),
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Intended fold count; fewer patients than folds only warns.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PresetsArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_binarization(s: &str) -> Result<Binarization, String> {
    s.parse().map_err(|e: radformer_core::Error| e.to_string())
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected min:max, got {s:?}");
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a, b))
}
