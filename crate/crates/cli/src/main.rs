mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ttgp::Error;

#[derive(Parser, Debug)]
#[command(name = "ttgp", version, about = "Gaussian processes with TT variational means on grid inducing inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and report the held-out metric.
    Train(TrainArgs),
    /// Write predictions for a feature file with a saved model.
    Predict(PredictArgs),
    /// Score a saved model on a labelled file.
    Evaluate(EvaluateArgs),
    /// Approximate a dense tensor by TT-SVD at increasing ranks.
    TtsvdDemo(DemoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Libsvm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Input file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Zero-based CSV column holding the target (default: last).
    #[arg(long)]
    pub label_col: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Grid points per dimension.
    #[arg(long, default_value_t = 10)]
    pub m0: usize,
    #[arg(long, default_value_t = 5)]
    pub tt_rank: usize,
    /// Dimension of a learned linear embedding in front of the grid (0: none).
    #[arg(long, default_value_t = 0)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to save the trained model; a run manifest is written beside it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Share of rows held out for evaluation; 0 evaluates on the training rows.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Initial kernel lengthscale (standardized units).
    #[arg(long, default_value_t = 1.0)]
    pub lengthscale: f64,
    /// Initial noise variance (standardized units, regression only).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// One lengthscale shared by all dimensions.
    #[arg(long)]
    pub tied_lengthscales: bool,
    /// Separate kernel hyperparameters for every class.
    #[arg(long)]
    pub per_class_kernels: bool,
    /// Optimize the mean and covariance factors directly instead of in whitened form.
    #[arg(long)]
    pub direct: bool,
    /// Divide the hyperparameter learning rate by 10 after this many epochs.
    #[arg(long)]
    pub hyper_lr_drop_after: Option<usize>,
    /// Held-out evaluation cadence in epochs.
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Dense tensor file: mode sizes on the first line, then row-major values.
    /// Without it a seeded smooth tensor is generated.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub dims: usize,
    /// Mode size of the generated tensor.
    #[arg(long, default_value_t = 5)]
    pub m0: usize,
    /// Standard deviation of the noise added to the generated tensor.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub max_rank: usize,
    /// Output CSV (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Exit status per failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Data { .. } | Error::Io { .. } | Error::Checkpoint(_) | Error::Shape(_) => 3,
        Error::Numeric(_) | Error::NotPositiveDefinite { .. } | Error::ResourceLimit { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::TtsvdDemo(a) => commands::ttsvd_demo(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match exit_code(&e) {
                2 => "config",
                3 => "data",
                _ => "numeric",
            };
            eprintln!("error ({kind}): {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
