//! Command-line front end: argument parsing, config resolution and
//! dispatch to the experiment driver.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dib_core::config::{RunConfig, DATA_DIR_ENV};
use dib_core::data::TaskKind;
use dib_core::experiment::{self, condition_slug};
use dib_core::learner::ModelKind;
use dib_core::trainer::ConditionSpec;
use dib_core::{verify, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA_MISSING: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dib", version, about = "Routed modular networks for continual learning", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one condition over its lambda list and trials.
    Run(ConfigArgs),
    /// Train a grid of conditions; completed runs are skipped.
    Sweep(ConfigArgs),
    /// Joint training on all tasks at once.
    LowerBound(ConfigArgs),
    /// Summarize a results table, or re-evaluate a run directory's checkpoint.
    Report(ReportArgs),
    /// Run the numerical self-checks.
    Verify,
}

/// Flags shared by the training commands. Each flag overrides the
/// corresponding key of `--config`.
#[derive(Debug, Default, Clone, Args)]
pub struct ConfigArgs {
    /// TOML file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// permuted, split or synthetic.
    #[arg(long)]
    pub dataset: Option<TaskKind>,
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// mlp, mhmlp, dib or rir.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Add the EWC penalty.
    #[arg(long)]
    pub ewc: bool,
    /// Comma-separated condition labels for `sweep`, e.g. `mlp,dib+ewc`.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<ConditionSpec>>,
    /// Comma-separated hyperparameter values.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Trials per condition and lambda; trial i uses seed + i.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Epochs per task.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs for joint training.
    #[arg(long)]
    pub lower_bound_epochs: Option<usize>,
    /// Number of tasks (at most 5 for split).
    #[arg(long)]
    pub num_tasks: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Samples per Fisher estimate.
    #[arg(long)]
    pub fisher_samples: Option<usize>,
    /// Base seed for initialisation, batching and routing.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed for train/validation splits and permutations.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Reduced widths, epochs and task counts.
    #[arg(long)]
    pub desk_scale: bool,
    /// Parallel runs.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write zero wall-clock durations so repeated runs give identical tables.
    #[arg(long)]
    pub no_timing: bool,
    /// Skip writing model checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results table (.csv or .json) or run directory.
    pub path: PathBuf,
    /// Data directory for re-evaluating a checkpoint.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    DataMissing(String),
    Numeric(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Failure(_) => EXIT_USAGE,
            CliError::DataMissing(_) => EXIT_DATA_MISSING,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::DataMissing(m) => write!(f, "data missing: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Failure(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::MissingFile(ref p) if !p.ends_with(experiment::MANIFEST_FILE) && !p.ends_with(experiment::CHECKPOINT_FILE) => {
                CliError::DataMissing(format!("{e}; fetch MNIST with scripts/fetch_mnist.sh and pass --data-dir or set {DATA_DIR_ENV}"))
            }
            Error::MissingDataDir { .. } | Error::BadMagic { .. } | Error::CountMismatch { .. } => {
                CliError::DataMissing(e.to_string())
            }
            Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Failure(other.to_string()),
        }
    }
}

/// Merges the optional config file with command-line flags (flags win) and
/// validates the result.
pub fn parse_config(args: &ConfigArgs, file_text: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = match file_text {
        Some(text) => RunConfig::from_toml_str(text).map_err(|e| CliError::Usage(format!("config file: {e}")))?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &args.$field { cfg.$field = v.clone(); })*
        };
    }
    set!(dataset, model, conditions, lambdas, trials, batch_size, learning_rate, fisher_samples, seed, data_seed, output_dir, workers);
    if args.data_dir.is_some() {
        cfg.data_dir = args.data_dir.clone();
    }
    if args.epochs.is_some() {
        cfg.epochs = args.epochs;
    }
    if args.lower_bound_epochs.is_some() {
        cfg.lower_bound_epochs = args.lower_bound_epochs;
    }
    if args.num_tasks.is_some() {
        cfg.num_tasks = args.num_tasks;
    }
    cfg.ewc |= args.ewc;
    cfg.desk_scale |= args.desk_scale;
    if args.no_timing {
        cfg.record_timing = false;
    }
    if args.no_checkpoints {
        cfg.save_checkpoints = false;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.dataset != TaskKind::Synthetic {
        match cfg.resolved_data_dir() {
            None => {
                return Err(CliError::DataMissing(format!(
                    "the {} dataset needs MNIST; pass --data-dir or set {DATA_DIR_ENV} (see scripts/fetch_mnist.sh)",
                    cfg.dataset
                )))
            }
            Some(dir) => cfg.data_dir = Some(dir),
        }
    }
    Ok(cfg)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let text = match &args.config {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?,
        ),
        None => None,
    };
    parse_config(args, text.as_deref())
}

fn run_named(cfg: &RunConfig, specs: &[ConditionSpec], name: &str) -> Result<(), CliError> {
    let tasks = experiment::load_tasks(cfg)?;
    let out = experiment::run_conditions(cfg, specs, &tasks, name)?;
    print!("{}", dib_core::metrics::render_summary(&out.summary));
    println!("results: {}", out.results_path.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), CliError> {
    let path = &args.path;
    if path.is_dir() {
        let rep = experiment::report_checkpoint(path, args.data_dir.as_deref())?;
        println!("{}: mean final error {:.2}%", rep.condition, rep.mean_final_error);
        let errs: Vec<String> = rep.final_errors.iter().map(|e| format!("{e:.2}")).collect();
        println!("per-task test error: {}", errs.join(", "));
        if let Some(ent) = &rep.entropy {
            for cell in &ent.cells {
                println!("cell {} mean conditional entropy per path: {:.4}", cell.cell, cell.module_mean);
            }
        }
        println!("report written to {}", path.join("report.json").display());
    } else {
        print!("{}", experiment::report_table(path)?);
    }
    Ok(())
}

fn verify_all() -> Result<(), CliError> {
    let results = verify::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => {
            let cfg = load_config(args)?;
            let spec = cfg.condition();
            run_named(&cfg, &[spec], &condition_slug(&spec.label()))
        }
        Command::Sweep(args) => {
            let cfg = load_config(args)?;
            run_named(&cfg, &cfg.sweep_conditions(), "sweep")
        }
        Command::LowerBound(args) => {
            let cfg = load_config(args)?;
            let tasks = experiment::load_tasks(&cfg)?;
            let runs = experiment::run_lower_bound(&cfg, &tasks)?;
            let errs: Vec<f64> = runs.iter().map(|m| m.outcome.mean_error).collect();
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64).sqrt();
            println!("lower bound ({}): {mean:.2} ± {sd:.2} over {} trials", cfg.dataset, errs.len());
            Ok(())
        }
        Command::Report(args) => report(args),
        Command::Verify => verify_all(),
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
