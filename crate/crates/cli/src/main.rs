mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privcap_core::accountant::Conversion;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Config(String),
    /// A numerical routine failed (exit 3).
    Numerical(String),
    /// Reading or writing a file failed (exit 4).
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<privcap_core::Error> for CliError {
    fn from(e: privcap_core::Error) -> Self {
        use privcap_core::Error as E;
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if e.is_io() || matches!(e, E::Format(_) | E::Json(_)) {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "privcap", version = VERSION, about = "Differentially private captioner training at desk scale")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Privacy budget of a DP-SGD run.
    Account(AccountArgs),
    /// Privacy / compute trade-off tables as CSV.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Train the toy captioner; writes a checkpoint, a manifest and per-step metrics.
    Train(RunArgs),
    /// Zero-shot and linear-probe evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Paired runs at (B, sigma) and (B/k, sigma/k) with the same step count.
    SimulateTan(RunArgs),
    /// Write the synthetic training pairs as text.
    ExportData(ExportArgs),
    /// Print the fully resolved configuration.
    ShowConfig(ConfigArgs),
}

fn parse_conversion(s: &str) -> Result<Conversion, String> {
    match s {
        "improved" => Ok(Conversion::Improved),
        "classic" => Ok(Conversion::Classic),
        _ => Err(format!("unknown conversion `{s}` (expected improved or classic)")),
    }
}

#[derive(Args, Debug)]
pub struct AccountArgs {
    /// Noise multiplier.
    #[arg(long)]
    sigma: f64,
    /// Sampling rate; alternatively give --batch and --dataset-size.
    #[arg(long, conflicts_with = "batch")]
    q: Option<f64>,
    /// Expected batch size.
    #[arg(long, requires = "dataset_size")]
    batch: Option<f64>,
    /// Dataset size; also sets delta = 1/N unless --delta is given.
    #[arg(long)]
    dataset_size: Option<f64>,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    delta: Option<f64>,
    /// RDP to (epsilon, delta) conversion: improved or classic.
    #[arg(long, value_parser = parse_conversion, default_value = "improved")]
    conversion: Conversion,
    /// Orders added to the default grid. The grid's largest order bounds how
    /// small epsilon can get: at least log(1/delta)/(alpha_max - 1) minus a
    /// small correction.
    #[arg(long, value_delimiter = ',')]
    extra_alphas: Vec<f64>,
    /// Print a JSON object with full-precision values.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
pub enum PlanCommand {
    /// Epsilon against dataset size at fixed batch, noise and steps.
    ///
    /// Columns: dataset_size, q, delta, epsilon, best_alpha.
    EpsVsN(EpsVsNArgs),
    /// Epoch budget against batch size for a target epsilon.
    ///
    /// Columns: batch_size, q, steps, epochs, capped. Steps and epochs are 0
    /// when the budget cannot be met; capped marks budgets beyond the step cap.
    EpochsVsBatch(EpochsVsBatchArgs),
    /// A reference run and its k-times smaller rehearsal at equal sigma/B.
    ///
    /// Columns: role, dataset_size, batch_size, sigma, steps, effective_noise.
    Tan(TanArgs),
}

#[derive(Args, Debug)]
pub struct PlanOutput {
    /// CSV destination; `-` for standard output.
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_parser = parse_conversion, default_value = "improved")]
    conversion: Conversion,
}

#[derive(Args, Debug)]
pub struct EpsVsNArgs {
    #[arg(long)]
    batch: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    /// Dataset sizes; by default a log-spaced sweep from --from to --to.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<f64>,
    #[arg(long, default_value_t = 1e6)]
    from: f64,
    #[arg(long, default_value_t = 1e10)]
    to: f64,
    #[arg(long, default_value_t = 17)]
    points: usize,
    /// Fixed delta; 1/N for each size by default.
    #[arg(long)]
    delta: Option<f64>,
    #[command(flatten)]
    out: PlanOutput,
}

#[derive(Args, Debug)]
pub struct EpochsVsBatchArgs {
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    dataset_size: f64,
    /// Batch sizes; by default a log-spaced sweep from --from to --to.
    #[arg(long, value_delimiter = ',')]
    batches: Vec<f64>,
    #[arg(long, default_value_t = 1e3)]
    from: f64,
    #[arg(long, default_value_t = 1e7)]
    to: f64,
    #[arg(long, default_value_t = 17)]
    points: usize,
    /// 1/N by default.
    #[arg(long)]
    delta: Option<f64>,
    #[command(flatten)]
    out: PlanOutput,
}

#[derive(Args, Debug)]
pub struct TanArgs {
    #[arg(long)]
    dataset_size: f64,
    #[arg(long)]
    batch: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    /// Scale factor for batch size and noise.
    #[arg(long)]
    k: f64,
    #[arg(long)]
    delta: Option<f64>,
    #[command(flatten)]
    out: PlanOutput,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML file with [model], [data], [dp], [run], [accountant], [eval] and [tan] sections.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set dp.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set dp.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_parser = parse_conversion)]
    conversion: Option<Conversion>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long, env = "PRIVCAP_OUT_DIR", default_value = "privcap-out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`. Its configuration is the base that
    /// --config and --set amend.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, env = "PRIVCAP_OUT_DIR", default_value = "privcap-out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of pairs; the configured dataset size by default.
    #[arg(long)]
    count: Option<usize>,
    /// Destination; `-` for standard output.
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Account(a) => commands::account(&a),
        Command::Plan(p) => commands::plan(&p),
        Command::Train(r) => commands::train(&r),
        Command::Eval(e) => commands::eval(&e),
        Command::SimulateTan(r) => commands::simulate_tan(&r),
        Command::ExportData(e) => commands::export_data(&e),
        Command::ShowConfig(c) => commands::show_config(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("privcap: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
