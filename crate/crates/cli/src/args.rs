use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kpl_core::ot::Algorithm;
use kpl_core::pipeline::Mode;

#[derive(Debug, Parser)]
#[command(
    name = "kpl",
    version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")"),
    about = "Zero-shot classification of precomputed embeddings with retrieved class descriptions, \
             optimal-transport pseudo-labels and proxy learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pick the top-k descriptions of every class and build text proxies.
    Retrieve(RetrieveArgs),
    /// Solve the entropic transport problem and write pseudo-labels.
    Plan(PlanArgs),
    /// Learn proxies from pseudo-labels, starting from given proxies.
    Learn(LearnArgs),
    /// Assign every image to its most similar proxy.
    Classify(ClassifyArgs),
    /// Score a predictions file against gold labels.
    Eval(EvalArgs),
    /// Run one classification mode end to end.
    Pipeline(PipelineArgs),
    /// Compare transport solvers on a generated or stored similarity matrix.
    BenchOt(BenchArgs),
    /// Generate a synthetic modality-gap dataset.
    GenFixture(GenFixtureArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Image embeddings (EMB1, one row per image).
    #[arg(long)]
    pub images: PathBuf,
    /// Knowledge base JSON.
    #[arg(long)]
    pub kb: PathBuf,
    /// Scale image rows to unit length before use.
    #[arg(long)]
    pub normalize_images: bool,
}

#[derive(Debug, Args)]
pub struct SolverOpts {
    /// Transport solver: sinkhorn_linear, sinkhorn_log or stable_greenkhorn [default: stable_greenkhorn].
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    /// Entropic temperature of the transport problem [default: 0.01].
    #[arg(long = "tau-ot", visible_alias = "tau")]
    pub tau_ot: Option<f64>,
    /// Iteration budget (Sinkhorn sweeps or single-line updates) [default: 100000].
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Largest accepted marginal violation [default: 1e-6].
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LearnOpts {
    /// Softmax temperature of the proxy classifier [default: 0.01].
    #[arg(long)]
    pub tau_learn: Option<f64>,
    /// Learning rate [default: 0.02].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Momentum coefficient in [0, 1) [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Maximum number of epochs [default: 500].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop once the loss decreases by less than this [default: 1e-7].
    #[arg(long)]
    pub loss_tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Descriptions kept per class [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    /// Write the text proxies here (EMB1).
    #[arg(long)]
    pub proxies: Option<PathBuf>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Descriptions kept per class [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    /// Class marginal as a JSON array of weights [default: uniform].
    #[arg(long)]
    pub marginal: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverOpts,
    /// Write the row-normalized plan here (EMB1).
    #[arg(long)]
    pub pseudo_labels: Option<PathBuf>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Image embeddings (EMB1).
    #[arg(long)]
    pub images: PathBuf,
    /// Pseudo-labels (EMB1, images x classes, rows summing to one).
    #[arg(long)]
    pub pseudo_labels: PathBuf,
    /// Initial proxies (EMB1, classes x dim, unit rows).
    #[arg(long)]
    pub proxies: PathBuf,
    /// Scale image rows to unit length before use.
    #[arg(long)]
    pub normalize_images: bool,
    #[command(flatten)]
    pub learn: LearnOpts,
    /// Write the learned proxies here (EMB1).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Image embeddings (EMB1).
    #[arg(long)]
    pub images: PathBuf,
    /// Proxies (EMB1, one row per class in knowledge-base order).
    #[arg(long)]
    pub proxies: PathBuf,
    /// Knowledge base JSON, used for class names.
    #[arg(long)]
    pub kb: PathBuf,
    /// Predictions CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions CSV.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold labels, one class name or index per line.
    #[arg(long)]
    pub labels: PathBuf,
    /// Knowledge base JSON, used for class names.
    #[arg(long)]
    pub kb: PathBuf,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// clip_baseline, description_baseline, kpl_text or kpl_full [default: kpl_full].
    #[arg(long)]
    pub mode: Option<Mode>,
    #[command(flatten)]
    pub input: InputArgs,
    /// Gold labels; adds accuracy to the report.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Class marginal as a JSON array of weights (kpl_full only) [default: uniform].
    #[arg(long)]
    pub marginal: Option<PathBuf>,
    /// Descriptions kept per class [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub solver: SolverOpts,
    #[command(flatten)]
    pub learn: LearnOpts,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Predictions CSV [default: the report path with a .csv extension].
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Instance {
    /// Entries drawn uniformly from [-1, 1].
    Uniform,
    /// Entries drawn from {-1, +1}.
    Stress,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Generated instance kind [default: uniform].
    #[arg(long, value_enum, conflicts_with = "matrix")]
    pub instance: Option<Instance>,
    /// Similarity matrix to use instead of a generated one (EMB1).
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Rows of the generated instance [default: 64].
    #[arg(long, conflicts_with = "matrix")]
    pub rows: Option<usize>,
    /// Columns of the generated instance [default: 8].
    #[arg(long, conflicts_with = "matrix")]
    pub cols: Option<usize>,
    /// Seed of the generated instance [default: 0].
    #[arg(long, conflicts_with = "matrix")]
    pub seed: Option<u64>,
    /// Class marginal as a JSON array of weights [default: uniform].
    #[arg(long)]
    pub marginal: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverOpts,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFixtureArgs {
    /// Seed of every random draw.
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images [default: 300].
    #[arg(long)]
    pub num_images: Option<usize>,
    /// Number of classes [default: 5].
    #[arg(long)]
    pub classes: Option<usize>,
    /// Embedding dimension [default: 32].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Class-specific share of each cluster mean [default: 0.6].
    #[arg(long)]
    pub separation: Option<f64>,
    /// Image noise around the cluster mean [default: 0.2].
    #[arg(long)]
    pub spread: Option<f64>,
    /// Modality-gap rotation angle in degrees [default: 25].
    #[arg(long)]
    pub angle: Option<f64>,
    /// Length of the constant modality-gap offset [default: 0.3].
    #[arg(long)]
    pub offset: Option<f64>,
    /// Description noise [default: 0.05].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Descriptions per class [default: 20].
    #[arg(long)]
    pub descriptions: Option<usize>,
    /// Class-name embedding noise as a multiple of --noise [default: 20].
    #[arg(long)]
    pub name_noise_factor: Option<f64>,
}
