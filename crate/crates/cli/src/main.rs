use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Estimate label distributions from sparse, noisy annotations.
#[derive(Debug, Parser)]
#[command(name = "crowdldl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a planted dataset: annotations, features, splits and the truth.
    Generate(GenerateArgs),
    /// Fit the graph model by simulated annealing.
    FitSa(FitSaArgs),
    /// Fit the graph model by EM with a belief-propagation E-step.
    FitEm(FitEmArgs),
    /// Write each fitted item's cluster label distribution.
    Snap(SnapArgs),
    /// Train the supervised learner on snapped or empirical targets.
    Train(TrainArgs),
    /// Train the encoder-decoder network.
    TrainLdlnm(TrainLdlnmArgs),
    /// Fit an annotator code to one item's label distribution.
    InferAnnotator(InferArgs),
    /// Predict label distributions with the supervised learner.
    Predict(PredictArgs),
    /// Predict label distributions with the network.
    PredictLdlnm(PredictLdlnmArgs),
    /// Score predictions against the empirical label distributions.
    Evaluate(EvaluateArgs),
    /// Run the full experiment described by a config file.
    Pipeline(PipelineArgs),
    /// Search K and L on the dev split and report the best cell.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
struct Seed {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AnnotationInput {
    /// CSV with columns item,annotator,label (1-based).
    #[arg(long)]
    annotations: PathBuf,
    /// Number of labels, when some never occur.
    #[arg(long)]
    num_labels: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Part {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Debug, Args)]
struct ItemSelection {
    /// Splits JSON {"train": [...], "dev": [...], "test": [...]}.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Which split to use; `all` needs no splits file.
    #[arg(long, value_enum, default_value_t = Part::All)]
    part: Part,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    l: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 50)]
    annotators: usize,
    #[arg(long, default_value_t = 10)]
    per_item: usize,
    #[arg(long, default_value_t = 4)]
    labels: usize,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    /// Resample Θ and Ω until item-cluster marginals are this far apart (TV).
    #[arg(long)]
    min_separation: Option<f64>,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Output directory for annotations.csv, features.csv, splits.json and
    /// truth.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Args)]
struct GraphFitArgs {
    #[command(flatten)]
    input: AnnotationInput,
    /// Fit on the train split of this file only.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    l: usize,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Inverse,
    Zero,
}

#[derive(Debug, Args)]
struct FitSaArgs {
    #[command(flatten)]
    fit: GraphFitArgs,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Inverse)]
    schedule: ScheduleArg,
    /// Use the ψ/Ω differences without the assignment terms.
    #[arg(long)]
    literal_deltas: bool,
}

#[derive(Debug, Args)]
struct FitEmArgs {
    #[command(flatten)]
    fit: GraphFitArgs,
    #[arg(long, default_value_t = 500)]
    max_rounds: usize,
    #[arg(long, default_value_t = 10)]
    bp_rounds: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    /// M-step from pairwise edge beliefs instead of product marginals.
    #[arg(long)]
    pairwise: bool,
}

#[derive(Debug, Args)]
struct SnapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Targets CSV item,p1..pP,argmax.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// CSV with columns item,f1..fJ.
    #[arg(long)]
    features: PathBuf,
    /// Targets CSV from `snap`; otherwise empirical distributions from
    /// --annotations are used.
    #[arg(long, conflicts_with = "annotations")]
    targets: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    num_labels: Option<usize>,
    #[command(flatten)]
    items: ItemSelection,
    #[arg(long, default_value_t = 2000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    /// Supervised model JSON.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KernelArg {
    Marginal,
    GeometricMean,
    ExpNegKl,
    Multinomial,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    supervised: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Graph model for cluster assignment; raw predictions without it.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KernelArg::Marginal)]
    kernel: KernelArg,
    /// Pseudo-count for the marginal and multinomial kernels.
    #[arg(long, default_value_t = 10.0)]
    kernel_n: f64,
    #[command(flatten)]
    items: ItemSelection,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CombineArg {
    Concat,
    Sum,
}

#[derive(Debug, Args)]
struct TrainLdlnmArgs {
    #[command(flatten)]
    input: AnnotationInput,
    #[arg(long)]
    features: PathBuf,
    /// Train on the train split of this file only.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    j_i: usize,
    #[arg(long, default_value_t = 32)]
    j_a: usize,
    #[arg(long, default_value_t = 32)]
    j_p: usize,
    #[arg(long, value_enum, default_value_t = CombineArg::Concat)]
    combine: CombineArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Checkpoint JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    input: AnnotationInput,
    /// 1-based item whose label distribution is matched.
    #[arg(long)]
    item: usize,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    decay: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma_a: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Result JSON.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RouteArg {
    PerAnnotator,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Expectation,
    ModeOfArgmax,
}

#[derive(Debug, Args)]
struct PredictLdlnmArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Restrict each item's ensemble to the annotators who labeled it.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    num_labels: Option<usize>,
    #[command(flatten)]
    items: ItemSelection,
    #[arg(long, value_enum, default_value_t = RouteArg::PerAnnotator)]
    route: RouteArg,
    #[arg(long, value_enum, default_value_t = AggregationArg::Expectation)]
    aggregation: AggregationArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    PredictionFirst,
    GoldFirst,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    input: AnnotationInput,
    #[command(flatten)]
    items: ItemSelection,
    #[arg(long, value_enum, default_value_t = DirectionArg::PredictionFirst)]
    direction: DirectionArg,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run a single cell instead of the config's grid.
    #[arg(long, requires = "l")]
    k: Option<usize>,
    #[arg(long, requires = "k")]
    l: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// K values, as a list (3,5,8) or an inclusive range (3..20).
    #[arg(long)]
    k: Option<String>,
    /// L values, same syntax as --k.
    #[arg(long)]
    l: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let validation = err.downcast_ref::<crowdldl::Error>().is_some_and(crowdldl::Error::is_validation)
                || err.downcast_ref::<commands::UsageError>().is_some();
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
