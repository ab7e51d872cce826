//! Argument declarations for every subcommand.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mitokit::data::Track;
use mitokit::splitting::{GroupKey, StratKey};

#[derive(Parser)]
#[command(
    name = "mitokit",
    version,
    about = "Dual-track mitosis analysis: disk-target detection and adapter-tuned atypia classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic patch dataset with a manifest.
    Synth(SynthArgs),
    /// Produce a leakage-free stratified split plan from a manifest.
    Split(SplitArgs),
    /// Train the folds described by a run config (TOML).
    Train(TrainArgs),
    /// Predict with the checkpoint ensemble of one or more run directories.
    Infer(InferArgs),
    /// Score a predictions file against its manifest.
    Eval(EvalArgs),
    /// Render a saved metrics report, optionally with ROC curves.
    Report(ReportArgs),
}

#[derive(Copy, Clone, ValueEnum)]
pub enum TrackArg {
    Detection,
    Classification,
}

impl From<TrackArg> for Track {
    fn from(t: TrackArg) -> Track {
        match t {
            TrackArg::Detection => Track::Detection,
            TrackArg::Classification => Track::Classification,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
pub enum StratArg {
    TissueDomain,
    ClassLabel,
}

impl From<StratArg> for StratKey {
    fn from(s: StratArg) -> StratKey {
        match s {
            StratArg::TissueDomain => StratKey::TissueDomain,
            StratArg::ClassLabel => StratKey::ClassLabel,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
pub enum GroupArg {
    Slide,
    None,
}

impl From<GroupArg> for GroupKey {
    fn from(g: GroupArg) -> GroupKey {
        match g {
            GroupArg::Slide => GroupKey::SlideId,
            GroupArg::None => GroupKey::None,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
pub enum SplitChoice {
    /// The plan's held-out test ids.
    Test,
    /// Every record in the manifest.
    All,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Which track's records to generate.
    #[arg(long, value_enum)]
    pub track: TrackArg,
    /// Number of synthetic slides.
    #[arg(long, default_value_t = 4)]
    pub slides: usize,
    /// Patches per slide.
    #[arg(long, default_value_t = 8)]
    pub patches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of positive records, in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    pub positive_rate: f64,
    /// Square patch edge in pixels.
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    /// Output directory for the images and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Held-out test fraction taken before folding.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Stratification key; defaults to the manifest track's natural key
    /// (tissue domain for detection, class label for classification).
    #[arg(long, value_enum)]
    pub strat: Option<StratArg>,
    /// Grouping key keeping related records on one side of each fold.
    #[arg(long, value_enum, default_value_t = GroupArg::Slide)]
    pub group: GroupArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path for the plan file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run config file (TOML); a snapshot is stored in the run directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Train only this fold index (for external fold-level parallelism).
    #[arg(long)]
    pub fold: Option<usize>,
    /// Root for run directories; defaults to $MITOKIT_RUN_ROOT, then ./runs.
    #[arg(long)]
    pub run_root: Option<PathBuf>,
    /// Run directory name; defaults to the config file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's epoch cap.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Override the config's early-stopping patience.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Override the config's batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override the optimizer learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Trained run directory; repeat to pool checkpoints across runs.
    #[arg(long = "run-dir", required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Manifest to predict on; defaults to the run config's manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split plan supplying test ids; defaults to the run config's plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Which records to predict.
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Average each member over the test-time augmentation policy
    /// (classification track only).
    #[arg(long)]
    pub tta: bool,
    /// Probability threshold for extracting detections.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Minimum connected-component area in pixels for a detection.
    #[arg(long, default_value_t = 10)]
    pub min_area_px: usize,
    /// Output predictions file (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predictions file produced by `infer`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Manifest holding the ground truth.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Decision threshold for classification metrics.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Print the full per-domain table instead of only the pooled row.
    #[arg(long)]
    pub by_domain: bool,
    /// Centroid matching radius in pixels (detection track).
    #[arg(long, default_value_t = 15.0)]
    pub radius_px: f64,
    /// Directory for report files; print-only when absent.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Saved metrics report (JSON) to render.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Also write per-domain ROC curves to this SVG path.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Predictions file backing the ROC curves (required with --roc).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Manifest backing the ROC curves (required with --roc).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
