//! Command-line frontend: reproducible pipelines over synthetic data
//! generation, random projection, feature selection, TF-IDF weighting and
//! network training.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors (unreadable
//! or malformed files, shape mismatches), 3 on numeric failures.

mod arch;
mod commands;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use rpkit::nn::Activation;
use rpkit::schemes::RpKind;
use rpkit::Error;
use serde::Serialize;

use arch::RpChoice;

#[derive(Parser)]
#[command(name = "rpkit", version, about = "Sparse data pipelines: projection, selection, training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic sparse classification datasets
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Randomly project a dataset to k dimensions
    Project(ProjectArgs),
    /// Score features and keep the best k
    Select(SelectArgs),
    /// TF-IDF weighting of term counts
    Tfidf(TfidfArgs),
    /// Train a feed-forward classifier
    Train(TrainArgs),
    /// Error rate of a checkpoint on a dataset
    Eval(EvalArgs),
    /// Time projection schemes over a (scheme, k) grid
    Bench(BenchArgs),
    /// Pairwise distance distortion of a projection
    Distortion(DistortionArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate train and test splits plus a JSON sidecar
    Gen(SynthGenArgs),
}

/// How projected features are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    Standardize,
    Maxabs,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> rpkit::Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "standardize" => Ok(NormMode::Standardize),
            "maxabs" => Ok(NormMode::Maxabs),
            other => Err(Error::InvalidArg(format!(
                "unknown normalization {other:?} (expected none, standardize or maxabs)"
            ))),
        }
    }
}

fn parse_scheme(s: &str) -> Result<RpKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_norm(s: &str) -> Result<NormMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rp_choice(s: &str) -> Result<RpChoice, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_act(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Serialize)]
pub struct SynthGenArgs {
    /// Feature count
    #[arg(long, conflicts_with = "preset")]
    pub d: Option<usize>,
    /// Total examples across the train and test splits
    #[arg(long, conflicts_with = "preset")]
    pub n: Option<usize>,
    /// Expected fraction of nonzero entries
    #[arg(long, conflicts_with = "preset")]
    pub rho: Option<f64>,
    /// Fraction of features separating the classes
    #[arg(long, conflicts_with = "preset")]
    pub psi: Option<f64>,
    /// Mean of the separating noise
    #[arg(long, default_value_t = 1.0)]
    pub sep_mean: f64,
    /// Standard deviation of the separating noise
    #[arg(long, default_value_t = 1.0)]
    pub sep_std: f64,
    /// Fraction of examples in the train split
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Generate a whole dataset grid: rho_grid or psi_grid
    #[arg(long)]
    pub preset: Option<String>,
    /// Scale divisor applied to the preset dimensions
    #[arg(long, default_value_t = 100)]
    pub preset_divisor: usize,
}

#[derive(Args, Serialize)]
pub struct ProjectArgs {
    /// Input dataset, LIBSVM text or RPDB binary
    #[arg(long = "in")]
    pub input: PathBuf,
    /// gaussian | achlioptas | li | srht | countsketch
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: RpKind,
    /// Output dimensionality
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset row slices
    #[arg(long, default_value_t = 1)]
    pub h: usize,
    /// Projection column slices
    #[arg(long, default_value_t = 1)]
    pub v: usize,
    /// Working-memory cap in bytes; 0 means unlimited
    #[arg(long, default_value_t = 0)]
    pub budget_bytes: usize,
    /// Spill directory for budgeted runs; defaults to $RP_SPILL_DIR
    #[arg(long)]
    pub spill_dir: Option<PathBuf>,
    /// none | standardize | maxabs
    #[arg(long, default_value = "none", value_parser = parse_norm)]
    pub normalize: NormMode,
    /// Reuse normalization statistics recorded in another projected file
    #[arg(long)]
    pub stats_from: Option<PathBuf>,
    /// Output RPDB file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct SelectArgs {
    /// chi2 | fscore | ig
    #[arg(long)]
    pub method: String,
    /// Features to keep
    #[arg(long)]
    pub k: Option<usize>,
    /// Input dataset, LIBSVM text
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Per-feature score table (CSV)
    #[arg(long)]
    pub out_scores: Option<PathBuf>,
    /// Dataset restricted to the selected features (LIBSVM)
    #[arg(long, requires = "k")]
    pub out_reduced: Option<PathBuf>,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("mode").required(true).args(["fit", "apply"])))]
pub struct TfidfArgs {
    /// Input term counts, LIBSVM text
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Fit document frequencies on this input
    #[arg(long)]
    pub fit: bool,
    /// Apply previously fitted weights from an .idf.json file
    #[arg(long, value_name = "IDF_JSON")]
    pub apply: Option<PathBuf>,
    /// Output dataset (LIBSVM)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Training dataset, LIBSVM text or RPDB binary with a labels sidecar
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset evaluated after every epoch
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Layer widths, e.g. d-1000-3000-3000-1
    #[arg(long, conflicts_with = "resume")]
    pub arch: Option<String>,
    /// First-layer treatment: none | fixed | finetuned
    #[arg(long, default_value = "none", value_parser = parse_rp_choice, conflicts_with = "resume")]
    pub rp: RpChoice,
    /// Projection scheme of the first layer
    #[arg(long, default_value = "gaussian", value_parser = parse_scheme, conflicts_with = "resume")]
    pub rp_scheme: RpKind,
    /// Insert batch normalization after the first layer
    #[arg(long, conflicts_with = "resume")]
    pub bn: bool,
    /// Hidden activation: linear | sigmoid | tanh | relu | lrelu[:slope]
    #[arg(long, default_value = "relu", value_parser = parse_act, conflicts_with = "resume")]
    pub act: Activation,
    /// Probability of dropping a hidden activation
    #[arg(long, default_value_t = 0.0, conflicts_with = "resume")]
    pub dropout: f64,
    /// Update probability of a finetuned projection layer
    #[arg(long, conflicts_with = "resume")]
    pub eta: Option<f64>,
    /// Initial learning rate
    #[arg(long, conflicts_with = "resume")]
    pub lr0: Option<f64>,
    /// Per-epoch learning-rate decay factor
    #[arg(long, conflicts_with = "resume")]
    pub lr_decay: Option<f64>,
    /// Momentum at epoch 0
    #[arg(long, conflicts_with = "resume")]
    pub momentum: Option<f64>,
    /// Momentum after the ramp
    #[arg(long, conflicts_with = "resume")]
    pub momentum_max: Option<f64>,
    /// Epochs over which momentum ramps up; defaults to a tenth of training
    #[arg(long, conflicts_with = "resume")]
    pub momentum_ramp: Option<usize>,
    /// Weight decay on dense and projection weights
    #[arg(long, conflicts_with = "resume")]
    pub l2: Option<f64>,
    /// Mini-batch size
    #[arg(long, conflicts_with = "resume")]
    pub batch: Option<usize>,
    /// Total epochs; with --resume, the new target
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Root seed for initialization, shuffling, dropout and update gates
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Directory receiving model.rpnn, history.csv and the manifest
    #[arg(long)]
    pub checkpoint_dir: PathBuf,
    /// Continue the run recorded in --checkpoint-dir
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// Model checkpoint (.rpnn)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset, LIBSVM text or RPDB binary with a labels sidecar
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    /// Directory for report.json and the manifest
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    /// Comma-separated schemes to time
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_scheme,
        default_value = "gaussian,achlioptas,li,srht,countsketch"
    )]
    pub schemes: Vec<RpKind>,
    /// Feature count of the timing fixture
    #[arg(long)]
    pub d: usize,
    /// Comma-separated projection widths
    #[arg(long, value_delimiter = ',')]
    pub k_list: Vec<usize>,
    /// Rows of the timing fixture
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Density of the timing fixture
    #[arg(long)]
    pub density: f64,
    /// Timed repetitions per cell; the median is reported
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct DistortionArgs {
    /// Input dataset, LIBSVM text or RPDB binary
    #[arg(long = "in")]
    pub input: PathBuf,
    /// gaussian | achlioptas | li | srht | countsketch
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: RpKind,
    /// Output dimensionality
    #[arg(long)]
    pub k: usize,
    /// Row pairs to measure; all pairs when they fit
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON report
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArg(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(SynthCommand::Gen(args)) => commands::synth_gen(args),
        Command::Project(args) => commands::project(args),
        Command::Select(args) => commands::select(args),
        Command::Tfidf(args) => commands::tfidf(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Bench(args) => commands::bench(args),
        Command::Distortion(args) => commands::distortion(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
