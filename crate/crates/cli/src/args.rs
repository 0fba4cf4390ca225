use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cograca_core::baselines::BaselineKind;
use cograca_core::pipeline::FingerprintMode;

pub const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, missing or malformed argument)
  3  missing input (file or directory not found)
  4  invalid input (malformed dataset, model, fingerprint or config file)
  5  invariant violation (shape mismatch or numerical failure)
  6  I/O error while writing outputs

Environment:
  COGRACA_SEED  overrides the seed in --config; --seed overrides both

Every run writes run_record.json and run_config.toml into --out.";

#[derive(Debug, Parser)]
#[command(
    name = "cograca",
    version,
    about = "Brain-cognition fingerprints from graph attention, generalized CCA and contrastive learning",
    after_help = AFTER_HELP,
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Directory that receives every artifact of the run
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Run configuration (TOML); built-in defaults fill missing keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for the randomness of this subcommand
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads across folds or seeds
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Weight of the individualized contrastive loss (0 with --lambda2 0 trains GraCa)
    #[arg(long, value_name = "W")]
    pub lambda1: Option<f64>,
    /// Weight of the multimodal contrastive loss
    #[arg(long, value_name = "W")]
    pub lambda2: Option<f64>,
    /// Training epochs
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one encoder on every visit; writes model.cgmodel and loss_trace.csv
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fingerprint visits with a saved model, or out of fold by subject-level cross-validation
    Fingerprint {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Saved model; without it one model is trained per fold
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Projection used for fingerprints
        #[arg(long, value_enum, default_value_t = ModeArg::Fused)]
        mode: ModeArg,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Out-of-fold representations from a reference method
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Dataset directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Reference method
        #[arg(value_enum)]
        kind: BaselineArg,
    },
    /// Analyses of fingerprints and trained models
    #[command(subcommand)]
    Evaluate(Evaluate),
    /// Aggregate the metrics JSON files of finished runs
    Report {
        /// Directory that receives report.json and report.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Run directories to aggregate
        #[arg(required = true, value_name = "RUN")]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Evaluate {
    /// Intra- vs inter-subject similarity of test fingerprints
    Similarity {
        #[command(flatten)]
        common: Common,
        /// Fingerprint CSV from `fingerprint` or `baseline`
        #[arg(long, value_name = "FILE")]
        fingerprints: PathBuf,
        /// Histogram bins over [-1, 1]
        #[arg(long, value_name = "N")]
        bins: Option<usize>,
    },
    /// Balanced accuracy of an MLP on out-of-fold fingerprints
    Classify {
        #[command(flatten)]
        common: Common,
        /// Fingerprint CSV with fold assignments
        #[arg(long, value_name = "FILE")]
        fingerprints: PathBuf,
        /// Dataset directory holding labels.csv
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Label column
        #[arg(long, value_name = "NAME", default_value = "attribute")]
        task: String,
        /// MLP seeds
        #[arg(long, value_name = "N")]
        repeats: Option<usize>,
    },
    /// Shapley attribution of the classifier margin to fingerprint components
    Attribute {
        #[command(flatten)]
        common: Common,
        /// Fingerprint CSV with fold assignments
        #[arg(long, value_name = "FILE")]
        fingerprints: PathBuf,
        /// Dataset directory holding labels.csv
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Label column
        #[arg(long, value_name = "NAME", default_value = "attribute")]
        task: String,
        /// Permutation samples; 0 enumerates coalitions exactly
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
    },
    /// Cognitive loadings and edge importance of shared components
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Saved model
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Dataset directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated component indices (default: the first few)
        #[arg(long, value_name = "J,..", value_delimiter = ',')]
        components: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fused,
    Brain,
    Cognition,
    TrainShared,
}

impl From<ModeArg> for FingerprintMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fused => FingerprintMode::Fused,
            ModeArg::Brain => FingerprintMode::Brain,
            ModeArg::Cognition => FingerprintMode::Cognition,
            ModeArg::TrainShared => FingerprintMode::TrainShared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    PcaCca,
    IcaCca,
    #[value(alias = "fmri-only-ica")]
    FmriIca,
    #[value(alias = "cognition-only")]
    Cognition,
}

impl From<BaselineArg> for BaselineKind {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::PcaCca => BaselineKind::PcaCca,
            BaselineArg::IcaCca => BaselineKind::IcaCca,
            BaselineArg::FmriIca => BaselineKind::FmriOnlyIca,
            BaselineArg::Cognition => BaselineKind::CognitionOnly,
        }
    }
}
