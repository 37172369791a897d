//! Command-line front end: argument parsing, config-file expansion and exit
//! status mapping. The subcommand pipelines live in [`commands`].

pub mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use gxe_reml::{ErrorClass, StructureKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable holding the log level.
pub const LOG_ENV: &str = "GXE_REML_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "gxe-reml",
    version,
    about = "Genotype-by-environment mixed models fitted by REML",
    long_about = "Genotype-by-environment mixed models fitted by REML.\n\n\
        Every subcommand accepts --config FILE, a flat `key = value` file whose keys are long \
        flag names (`max_iter` or `max-iter`); flags given on the command line take precedence.\n\
        Logging goes to standard error and is controlled by GXE_REML_LOG (error, warn, info, debug).\n\
        Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn daily weather into an environment correlation and distance matrix
    EnvProcess(EnvProcessArgs),
    /// Simulate markers, kinship and multi-environment phenotypes
    Simulate(SimulateArgs),
    /// Fit a model by REML and write estimates, BLUPs and diagnostics
    Fit(FitArgs),
    /// Look up predictions for genotype-environment cells from a fit
    Predict(PredictArgs),
    /// Sparse-testing cross-validation of one or more models
    Cv(CvArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EnvProcessArgs {
    /// Key-value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Weather CSV: environment,day,t_min,t_max,<covariates...>
    #[arg(long, value_name = "FILE")]
    pub weather: PathBuf,
    /// Comma-separated covariate columns to use
    #[arg(long, value_name = "LIST")]
    pub variables: String,
    /// Bin width in growing degree days
    #[arg(long, default_value_t = 100.0)]
    pub interval: f64,
    /// GDD window kept, as lo:hi
    #[arg(long, value_name = "LO:HI")]
    pub window: String,
    /// Output correlation matrix CSV
    #[arg(long, value_name = "FILE")]
    pub out_corr: PathBuf,
    /// Output distance matrix CSV
    #[arg(long, value_name = "FILE")]
    pub out_dist: PathBuf,
    /// Also write the standardized feature matrix
    #[arg(long, value_name = "FILE")]
    pub out_features: Option<PathBuf>,
}

/// Environment matrices shared by structure-building subcommands.
#[derive(Debug, Clone, Args)]
pub struct MatrixArgs {
    /// Environment correlation matrix CSV (cor1, corP)
    #[arg(long, value_name = "FILE")]
    pub corr: Option<PathBuf>,
    /// Environment squared-distance matrix CSV (kern1, kernP, ka)
    #[arg(long, value_name = "FILE")]
    pub dist: Option<PathBuf>,
    /// Comma-separated bandwidth grid for ka
    #[arg(long, value_name = "LIST")]
    pub grid: Option<String>,
}

/// Simulation settings; also the contents of a cv --sim-config file.
#[derive(Debug, Clone, Args)]
pub struct SimSpec {
    /// True environment covariance structure
    #[arg(long, value_parser = parse_kind)]
    pub structure: StructureKind,
    /// Comma-separated true structure parameters, in parameter order
    #[arg(long, value_name = "LIST")]
    pub params: String,
    #[command(flatten)]
    pub matrices: MatrixArgs,
    /// Number of genotypes (ignored when --kinship is given)
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    pub n_genotypes: u64,
    /// Number of simulated markers
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    pub n_markers: u64,
    /// Number of environments for main and diag (labelled E1..Ep)
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub n_environments: Option<u64>,
    /// Residual variance
    #[arg(long, default_value_t = 1.0)]
    pub resid_var: f64,
    /// Comma-separated environment means (default all zero)
    #[arg(long, value_name = "LIST")]
    pub env_means: Option<String>,
    /// Random seed
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Kinship CSV to use instead of simulated markers
    #[arg(long, value_name = "FILE")]
    pub kinship: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    /// Key-value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SimSpec,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct FitArgs {
    /// Key-value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Phenotype CSV: genotype,environment,value
    #[arg(long, value_name = "FILE")]
    pub phenotypes: PathBuf,
    /// Kinship matrix CSV
    #[arg(long, value_name = "FILE")]
    pub kinship: PathBuf,
    /// Environment covariance structure
    #[arg(long, value_parser = parse_kind)]
    pub structure: StructureKind,
    #[command(flatten)]
    pub matrices: MatrixArgs,
    /// Maximum number of AI-REML iterations
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iter: u64,
    /// Convergence tolerance on the log-likelihood change
    #[arg(long, default_value_t = 1e-6, value_parser = parse_positive)]
    pub tol: f64,
    /// Output directory for params.csv, blups.csv, loglik.csv and ai.csv
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    /// Key-value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Result directory written by `fit`
    #[arg(long, value_name = "DIR")]
    pub fit: PathBuf,
    /// CSV of genotype,environment cells to predict
    #[arg(long, value_name = "FILE")]
    pub targets: PathBuf,
    /// Output CSV: genotype,environment,blup,fitted
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CvArgs {
    /// Key-value file supplying defaults for any flag
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Observed phenotype CSV; accuracy is measured against held-out values
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "sim_config",
        required_unless_present = "sim_config"
    )]
    pub phenotypes: Option<PathBuf>,
    /// Simulation key-value file; accuracy is measured against true genetic values
    #[arg(long, value_name = "FILE")]
    pub sim_config: Option<PathBuf>,
    /// Kinship CSV (required with --phenotypes)
    #[arg(long, value_name = "FILE")]
    pub kinship: Option<PathBuf>,
    /// Comma-separated structures to compare, e.g. cor1,corP,kern1
    #[arg(long, value_name = "LIST")]
    pub models: String,
    #[command(flatten)]
    pub matrices: MatrixArgs,
    /// Check genotypes observed in every environment
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub checks: u64,
    /// Environments observed per non-check genotype
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub envs_per_variety: u64,
    /// Number of replicates
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub replicates: u64,
    /// Seed for splits, simulations and random correlation matrices
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Comma-separated blend weights in [0, 1] for correlation models
    #[arg(long, value_name = "LIST")]
    pub lambdas: Option<String>,
    /// Maximum number of AI-REML iterations per fit
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iter: u64,
    /// Convergence tolerance per fit
    #[arg(long, default_value_t = 1e-6, value_parser = parse_positive)]
    pub tol: f64,
    /// Worker threads (default: available processors)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
    /// Per-replicate report CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write per-model means and medians
    #[arg(long, value_name = "FILE")]
    pub summary_out: Option<PathBuf>,
}

/// Wrapper used to parse a cv --sim-config file.
#[derive(Debug, Parser)]
#[command(name = "sim-config", no_binary_name = true)]
struct SimSpecFile {
    #[command(flatten)]
    spec: SimSpec,
}

fn parse_kind(s: &str) -> Result<StructureKind, String> {
    s.parse::<StructureKind>().map_err(|e| e.to_string())
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(gxe_reml::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e.class() {
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<gxe_reml::Error> for CliError {
    fn from(e: gxe_reml::Error) -> Self {
        CliError::Core(e)
    }
}

/// Long flag names accepted by a subcommand.
fn long_flags(sub: &clap::Command) -> Vec<String> {
    sub.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect()
}

/// Turns a key-value file into `--key value` arguments, checking every key
/// against the flags of `sub`.
fn config_args(path: &Path, sub: &clap::Command) -> Result<Vec<OsString>, CliError> {
    let kv = gxe_reml::io::read_key_value(path)?;
    let flags = long_flags(sub);
    let mut out = Vec::with_capacity(2 * kv.len());
    for (key, value) in kv {
        let flag = key.replace('_', "-");
        if flag == "config" || !flags.contains(&flag) {
            return Err(CliError::Usage(format!(
                "unknown key `{key}` in config file {} for `{}`",
                path.display(),
                sub.get_name()
            )));
        }
        out.push(OsString::from(format!("--{flag}")));
        out.push(OsString::from(value));
    }
    Ok(out)
}

/// Inserts the `--config` file's entries right after the subcommand name,
/// so that explicit flags later on the command line override them.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let sub_name = argv[1].to_string_lossy().to_string();
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(argv);
    };
    let mut path = None;
    let mut i = 2;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            match argv.get(i + 1) {
                Some(v) => path = Some(PathBuf::from(v)),
                None => return Err(CliError::Usage("--config requires a file".into())),
            }
            i += 1;
        } else if let Some(v) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(v));
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let injected = config_args(&path, sub)?;
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Parses a simulation key-value file.
pub fn read_sim_spec(path: &Path) -> Result<SimSpec, CliError> {
    let cmd = SimSpecFile::command();
    let args = config_args(path, &cmd)?;
    SimSpecFile::try_parse_from(args)
        .map(|f| f.spec)
        .map_err(|e| {
            CliError::Usage(format!(
                "in {}: {}",
                path.display(),
                e.render().to_string().trim()
            ))
        })
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Full entry point; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    init_logging();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("gxe-reml: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("gxe-reml: {e}");
            e.exit_code()
        }
    }
}
