//! Command-line front end for the anchor pipeline.
//!
//! Every subcommand reads and writes `.vanc` tensor files and prints one
//! JSON summary object to stdout. Failures print a single JSON line
//! `{"error": <code>, "message": <text>}` to stderr and exit with status 1
//! (data or validation errors) or 2 (usage errors).

mod commands;
mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use thiserror::Error;

use anchorlab::{DType, Variant};

pub use files::{labels_from_tensor, labels_to_tensor, sibling_path};

/// Environment variable holding the log filter (e.g. `debug`, `anchorlab=trace`).
pub const LOG_ENV: &str = "ANCHORLAB_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] anchorlab::Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write summary: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "usage",
            CliError::Json(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Subspace anchor discovery and attention reweighting.
///
/// Tensors are `.vanc` files; embeddings are stored one token per row.
/// Set ANCHORLAB_LOG (e.g. `info`, `debug`) to control log verbosity.
#[derive(Debug, Parser)]
#[command(name = "anchorlab", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set rho=200`; repeatable, later wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Scalar type of written tensors.
    #[arg(long, global = true, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,

    /// Seed: the data seed for `synth`, the k-means seed everywhere else.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Gated,
    LogitBias,
    PreSoftmax,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Gated => Variant::Gated,
            VariantArg::LogitBias => Variant::LogitBias,
            VariantArg::PreSoftmax => Variant::PreSoftmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    Ssc,
    Uniform,
    Kmeans,
}

impl From<ScorerArg> for anchorlab::Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Ssc => anchorlab::Scorer::Ssc,
            ScorerArg::Uniform => anchorlab::Scorer::Uniform,
            ScorerArg::Kmeans => anchorlab::Scorer::KMeans,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    Vanc,
}

/// α overrides shared by `scalers` and `attend`.
#[derive(Debug, Clone, Default, Args)]
pub struct AlphaArgs {
    #[arg(long)]
    pub alpha_q: Option<f64>,
    #[arg(long)]
    pub alpha_k: Option<f64>,
    #[arg(long)]
    pub alpha_v: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample embeddings from a union of random subspaces.
    Synth {
        /// Embeddings output (N x D).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Ground-truth labels output; defaults to `<out stem>.truth.vanc`.
        #[arg(long, value_name = "PATH")]
        truth_out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n_subspaces: usize,
        #[arg(long, default_value_t = 4)]
        subspace_dim: usize,
        #[arg(long, default_value_t = 64)]
        ambient_dim: usize,
        #[arg(long, default_value_t = 40)]
        points_per_subspace: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
        /// Make the subspaces mutually orthogonal.
        #[arg(long)]
        orthogonal: bool,
    },
    /// Solve for the self-expression matrix W of visual-token embeddings.
    Solve {
        /// Visual-token embeddings (N_vis x D).
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// W output (N_vis x N_vis).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Write the per-iteration residual trace as CSV.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Threshold W, build the affinity and cluster tokens into subspaces.
    Cluster {
        /// Self-expression matrix W.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Cluster labels output (vector of N_vis label ids).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "PATH")]
        affinity_out: Option<PathBuf>,
    },
    /// Compute anchor scores over the full token sequence.
    Score {
        /// W for the `ssc` scorer; embeddings for `uniform` and `kmeans`.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Cluster labels (required by the `ssc` scorer).
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
        /// Extended scores output (vector of N).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Unnormalized visual-token scores output.
        #[arg(long, value_name = "PATH")]
        raw_out: Option<PathBuf>,
        /// Labels written by the `kmeans` scorer.
        #[arg(long, value_name = "PATH")]
        labels_out: Option<PathBuf>,
        #[arg(long, value_enum)]
        scorer: Option<ScorerArg>,
    },
    /// Turn extended scores into query/key/value scaler columns (N x 3).
    Scalers {
        /// Extended scores (vector of N).
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Cluster labels, needed when `boost_top_m` is set.
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        alphas: AlphaArgs,
    },
    /// Run attention with token scalers applied.
    Attend {
        /// Queries (N x H*d_h); heads are consecutive column blocks.
        #[arg(long, value_name = "PATH")]
        q: PathBuf,
        #[arg(long, value_name = "PATH")]
        k: PathBuf,
        #[arg(long, value_name = "PATH")]
        v: PathBuf,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Scaler columns (N x 3). Takes precedence over `--scores`.
        #[arg(long, value_name = "PATH")]
        scalers: Option<PathBuf>,
        /// Extended scores (vector of N), turned into scalers with the α values.
        #[arg(long, value_name = "PATH")]
        scores: Option<PathBuf>,
        /// Cluster labels, needed with `--scores` when `boost_top_m` is set.
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Gated)]
        variant: VariantArg,
        /// Additive logit mask (N x N, entries 0 or -inf).
        #[arg(long, value_name = "PATH", conflicts_with = "causal")]
        mask: Option<PathBuf>,
        #[arg(long)]
        causal: bool,
        /// Output Y (N x H*d_h).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Attention matrices, heads stacked vertically (H*N x N).
        #[arg(long, value_name = "PATH")]
        attention_out: Option<PathBuf>,
        /// Variant minus baseline attention, stacked like `--attention-out`.
        #[arg(long, value_name = "PATH")]
        delta_out: Option<PathBuf>,
        /// Per-row visual mass of the variant (H*N vector).
        #[arg(long, value_name = "PATH")]
        visual_mass_out: Option<PathBuf>,
        #[command(flatten)]
        alphas: AlphaArgs,
    },
    /// Run the full pipeline on embeddings and report clustering accuracy.
    Bench {
        /// Embeddings (N_vis x D).
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Ground-truth labels; defaults to `<in stem>.truth.vanc` if present.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        /// Predicted labels output.
        #[arg(long, value_name = "PATH")]
        labels_out: Option<PathBuf>,
        /// Scaler columns output (N x 3).
        #[arg(long, value_name = "PATH")]
        scalers_out: Option<PathBuf>,
    },
    /// Convert a tensor file to CSV or re-encode it.
    Export {
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
        format: ExportFormat,
    },
}

/// Runs a parsed invocation and returns its JSON summary.
pub fn dispatch(cli: &Cli) -> CliResult<Value> {
    commands::run(cli)
}

/// Parses `args`, runs the command, prints the summary or the error line,
/// and returns the process exit status.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.code(), "message": e.to_string() }));
            e.exit_code()
        }
    }
}
