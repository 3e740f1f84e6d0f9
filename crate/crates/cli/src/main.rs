//! Pipeline front door. Each subcommand reads its inputs from disk, writes
//! its outputs to the run directory, and communicates with the other stages
//! only through those artifacts.

mod artifacts;
mod commands;
mod config;
mod errors;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use precedent_core::analysis::{CorrectMode, Filter, ScoreOrientation};
use precedent_core::corpus::CitedBy;
use precedent_core::influence::SolveMethod;
use precedent_core::model::Head;
use precedent_core::taxonomy::{ClaimRule, Granularity, PrecedentKind, Scope};

pub const OUT_DIR_ENV: &str = "PRECEDENT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "precedent",
    version,
    about = "Legal outcome models, influence attribution, and precedent analysis",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Output directory for artifacts (default: $PRECEDENT_OUT_DIR or the
    /// working directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for whichever stage runs; stage-specific seeds override it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus with planted precedent relations.
    Synth(SynthArgs),
    /// Load, validate, and optionally embed an external corpus.
    Ingest(IngestArgs),
    /// Restrict a corpus to cases participating in precedent.
    Filter(FilterArgs),
    /// Train the outcome model and score its test predictions.
    Train(TrainArgs),
    /// Attribute test losses to training cases via influence scores.
    Influence(InfluenceArgs),
    /// Label train/test pairs with precedent relations.
    Label(LabelArgs),
    /// Correlate influence scores with precedent labels over the standard
    /// grid.
    Correlate(CorrelateArgs),
    /// Fit the score-threshold precedent retrieval classifier.
    Classify(ClassifyArgs),
    /// Aggregate stage outputs into a single report.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub claim_rate: Option<f64>,
    #[arg(long)]
    pub positive_rate: Option<f64>,
    #[arg(long)]
    pub cite_per_test: Option<usize>,
    #[arg(long)]
    pub applied_bias: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// Corpus file to load (JSON lines).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Sidecar embedding store (JSON lines of id/embedding).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Materialize embeddings at this width for cases that lack one,
    /// hashing their facts text.
    #[arg(long)]
    pub encode_dim: Option<usize>,
    /// Reject test cases citing other test cases.
    #[arg(long)]
    pub strict_test_citations: Option<bool>,
}

#[derive(Debug, clap::Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Which split's citations keep a training case alive.
    #[arg(long, value_enum)]
    pub cited_by: Option<CitedByArg>,
    /// Citation regex patterns (JSON) for extracting mentions from text.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    /// Case registry (JSON) resolving mentions to case ids.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long)]
    pub d2: Option<usize>,
    /// Bypass the hidden layer; heads read the embedding directly.
    #[arg(long)]
    pub linear: Option<bool>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2_strength: Option<f64>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also stop once the full-objective gradient norm drops this low.
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Decision threshold for the binary head's positive calls.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct InfluenceArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
    #[arg(long)]
    pub lissa_depth: Option<usize>,
    #[arg(long)]
    pub lissa_samples: Option<usize>,
    #[arg(long)]
    pub lissa_scale: Option<f64>,
    #[arg(long)]
    pub lissa_batch: Option<usize>,
    #[arg(long)]
    pub solver_seed: Option<u64>,
    #[arg(long)]
    pub exact_cap: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long, value_enum)]
    pub claim_rule: Option<ClaimRuleArg>,
}

#[derive(Debug, clap::Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub influence: Option<PathBuf>,
    /// Model predictions; required by the correct-only and model-based
    /// filters.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub orientation: Option<OrientationArg>,
    #[arg(long, value_enum)]
    pub filter: Option<FilterArg>,
    #[arg(long, value_enum)]
    pub correct_mode: Option<CorrectModeArg>,
    #[arg(long, value_enum)]
    pub claim_rule: Option<ClaimRuleArg>,
}

#[derive(Debug, clap::Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub influence: Option<PathBuf>,
    /// Which relation the retrieval classifier targets.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    pub claim_rule: Option<ClaimRuleArg>,
    #[arg(long, value_enum)]
    pub orientation: Option<OrientationArg>,
    /// Likelihood penalty breaking ties between equally separating fits.
    #[arg(long)]
    pub tiebreak: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeadArg {
    Simple,
    Joint,
}

impl HeadArg {
    pub fn into_core(self) -> Head {
        match self {
            HeadArg::Simple => Head::Simple,
            HeadArg::Joint => Head::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Exact,
    Cg,
    Lissa,
}

impl MethodArg {
    pub fn into_core(self) -> SolveMethod {
        match self {
            MethodArg::Exact => SolveMethod::Exact,
            MethodArg::Cg => SolveMethod::Cg,
            MethodArg::Lissa => SolveMethod::Lissa,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CitedByArg {
    Test,
    Any,
}

impl CitedByArg {
    pub fn into_core(self) -> CitedBy {
        match self {
            CitedByArg::Test => CitedBy::TestSplit,
            CitedByArg::Any => CitedBy::AnySplit,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CitedByArg::Test => "test",
            CitedByArg::Any => "any",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Cited,
    Claimed,
}

impl ScopeArg {
    pub fn into_core(self) -> Scope {
        match self {
            ScopeArg::Cited => Scope::Cited,
            ScopeArg::Claimed => Scope::Claimed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Article,
    Case,
}

impl GranularityArg {
    pub fn into_core(self) -> Granularity {
        match self {
            GranularityArg::Article => Granularity::Article,
            GranularityArg::Case => Granularity::Case,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClaimRuleArg {
    Existential,
    IdenticalClaimSets,
}

impl ClaimRuleArg {
    pub fn into_core(self) -> ClaimRule {
        match self {
            ClaimRuleArg::Existential => ClaimRule::Existential,
            ClaimRuleArg::IdenticalClaimSets => ClaimRule::IdenticalClaimSets,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrientationArg {
    /// Larger score = more supportive training case.
    Support,
    /// Raw influence: larger = raises the test loss.
    RawLoss,
}

impl OrientationArg {
    pub fn into_core(self) -> ScoreOrientation {
        match self {
            OrientationArg::Support => ScoreOrientation::Support,
            OrientationArg::RawLoss => ScoreOrientation::RawLoss,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FilterArg {
    All,
    CorrectOnly,
    ModelBased,
}

impl FilterArg {
    pub fn into_core(self) -> Filter {
        match self {
            FilterArg::All => Filter::All,
            FilterArg::CorrectOnly => Filter::CorrectOnly,
            FilterArg::ModelBased => Filter::ModelBased,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorrectModeArg {
    FullVector,
    PerArticle,
}

impl CorrectModeArg {
    pub fn into_core(self) -> CorrectMode {
        match self {
            CorrectModeArg::FullVector => CorrectMode::FullVector,
            CorrectModeArg::PerArticle => CorrectMode::PerArticle,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    AppliedPos,
    AppliedNeg,
    DistPos,
    DistNeg,
    /// Any precedent relation.
    Overall,
}

impl KindArg {
    pub fn kind(self) -> Option<PrecedentKind> {
        match self {
            KindArg::AppliedPos => Some(PrecedentKind::AppliedPos),
            KindArg::AppliedNeg => Some(PrecedentKind::AppliedNeg),
            KindArg::DistPos => Some(PrecedentKind::DistPos),
            KindArg::DistNeg => Some(PrecedentKind::DistNeg),
            KindArg::Overall => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KindArg::AppliedPos => "applied_pos",
            KindArg::AppliedNeg => "applied_neg",
            KindArg::DistPos => "dist_pos",
            KindArg::DistNeg => "dist_neg",
            KindArg::Overall => "overall",
        }
    }
}

fn emit_error(kind: &str, exit: i32, message: &str) -> ! {
    let payload = serde_json::json!({
        "error": { "kind": kind, "exit": exit, "message": message }
    });
    eprintln!("{payload}");
    std::process::exit(exit);
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    std::process::exit(0);
                }
                _ => emit_error("config", 2, &err.to_string()),
            }
        }
    };
    if let Err(err) = commands::run(cli) {
        emit_error(err.kind(), err.exit_code(), &err.to_string());
    }
}
