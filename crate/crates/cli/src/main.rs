mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sharplab::scalar::Precision;

#[derive(Parser)]
#[command(
    name = "sharplab",
    about = "Sharpness-dynamics laboratory for single-neuron deep linear networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset selection shared by analysis commands.
#[derive(Args, Clone, Debug)]
struct DataArgs {
    /// CSV file (header row; feature columns then a label column).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Built-in dataset: `eos` (embedded 2x2 instance) or `minimal`
    /// (two-row synthetic generator at its default parameters).
    #[arg(long, conflicts_with = "data")]
    preset: Option<String>,
    /// Standardize features to mean 0 / variance 1 (CSV only).
    #[arg(long, default_value_t = false)]
    standardize: bool,
    /// Label column name (CSV only; defaults to the last column).
    #[arg(long)]
    label: Option<String>,
    /// Seed for synthetic presets.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Report N, d, r, sigma_1, Q, C~, and predicted sharpness for D=2..5.
    Difficulty {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model and write trajectory CSV, final-state JSON, and
    /// optional SVG plots.
    Train(Box<commands::TrainArgs>),
    /// Emit sharpness-bound reports as JSON.
    Bounds {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Layer imbalance at the minimizer (two-layer bounds).
        #[arg(long, default_value_t = 0.0)]
        imbalance: f64,
        /// Init std of u (enables the init/convergence bound pair).
        #[arg(long)]
        alpha: Option<f64>,
        /// Init std of v1 (enables the init/convergence bound pair).
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suites; exit code is nonzero when any suite fails.
    Verify {
        /// `all` or one of the suite names.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiplies every suite tolerance (for exercising the failure
        /// path).
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
    },
    /// Run a cartesian grid of experiments from a sweep config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset CSV.
    Synth(commands::SynthArgs),
    /// The embedded edge-of-stability run: GD at lr 2/50 from
    /// u=(0.01,0.01), v=0.01.
    EosDemo {
        #[arg(long, default_value = "binary64")]
        precision: Precision,
        #[arg(long, default_value_t = 0.04)]
        lr: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: u64,
        #[arg(long, default_value_t = 1e-7)]
        loss_stop: f64,
        #[arg(long, default_value_t = 10)]
        record_every: u64,
        #[arg(long, default_value = "eos-out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Difficulty { data, out } => commands::cmd_difficulty(&data, out.as_deref()),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Bounds {
            data,
            depth,
            imbalance,
            alpha,
            beta,
            out,
        } => commands::cmd_bounds(&data, depth, imbalance, alpha, beta, out.as_deref()),
        Command::Verify {
            suite,
            seed,
            tolerance_scale,
        } => return commands::cmd_verify(&suite, seed, tolerance_scale),
        Command::Sweep { config, out } => commands::cmd_sweep(&config, out.as_deref()),
        Command::Synth(args) => commands::cmd_synth(&args),
        Command::EosDemo {
            precision,
            lr,
            max_steps,
            loss_stop,
            record_every,
            out,
        } => commands::cmd_eos_demo(precision, lr, max_steps, loss_stop, record_every, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
