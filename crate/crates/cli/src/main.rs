//! `riv`: confidence intervals for a treatment effect when some candidate
//! instruments may be invalid.
//!
//! Subcommands: `ci` (analyze one dataset), `select` (inspect instrument
//! selection), `simulate` (Monte Carlo coverage/length study). Machine
//! readable JSON or CSV goes to stdout; structured errors go to stderr with
//! exit code 1; exit code 2 flags an analysis whose intervals came back empty
//! (the identification rule looks violated).

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use riv_core::data_io::{self, ColumnSchema, Dataset, SummaryStats};
use riv_core::error::Error;
use riv_core::iv_select::select_tsht;
use riv_core::pipeline::{analyze, AnalysisConfig, AnalysisInput, Mode};
use riv_core::reduced_form::fit_ols;
use riv_core::sampling::LambdaRule;
use riv_core::searching::RhoMethod;
use riv_core::seed::derive_seed;
use riv_core::sim::{build_setting, run_replications, emit_table, Method, TableFormat};

mod output;

#[derive(Parser)]
#[command(
    name = "riv",
    version,
    about = "Uniform confidence intervals for treatment effects with possibly invalid instruments"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Analyze a dataset: searching and sampling confidence intervals.
    Ci(CiArgs),
    /// Run instrument selection only and print the voting diagnostics.
    Select(SelectArgs),
    /// Monte Carlo coverage and length study over named settings.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Majority,
    Plurality,
}

impl From<ModeArg> for Mode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::Majority => Mode::Majority,
            ModeArg::Plurality => Mode::Plurality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RhoArg {
    Bootstrap,
    Bonferroni,
    SqrtLog,
}

impl From<RhoArg> for RhoMethod {
    fn from(value: RhoArg) -> Self {
        match value {
            RhoArg::Bootstrap => RhoMethod::Bootstrap,
            RhoArg::Bonferroni => RhoMethod::Bonferroni,
            RhoArg::SqrtLog => RhoMethod::SqrtLog,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Text,
}

/// Input selection shared by `ci` and `select`.
#[derive(Args, Debug)]
struct InputArgs {
    /// CSV file with a header row (raw observations).
    #[arg(long, conflicts_with = "summary")]
    input: Option<PathBuf>,
    /// Summary-statistics JSON file.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Outcome column name.
    #[arg(long)]
    outcome: Option<String>,
    /// Treatment column name.
    #[arg(long)]
    treatment: Option<String>,
    /// Instrument column names, comma separated.
    #[arg(long, value_delimiter = ',')]
    instruments: Vec<String>,
    /// Covariate column names, comma separated.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Mean-center and unit-scale instrument and covariate columns.
    #[arg(long)]
    standardize: bool,
}

enum LoadedInput {
    Data(Dataset),
    Summary(SummaryStats),
}

impl InputArgs {
    fn load(&self) -> Result<LoadedInput, Error> {
        match (&self.input, &self.summary) {
            (Some(path), None) => {
                let outcome = self
                    .outcome
                    .clone()
                    .ok_or_else(|| Error::Schema("--outcome is required with --input".into()))?;
                let treatment = self
                    .treatment
                    .clone()
                    .ok_or_else(|| Error::Schema("--treatment is required with --input".into()))?;
                if self.instruments.is_empty() {
                    return Err(Error::Schema("--instruments is required with --input".into()));
                }
                let schema = ColumnSchema::new(
                    outcome,
                    treatment,
                    self.instruments.clone(),
                    self.covariates.clone(),
                );
                let data = data_io::load_csv(path, &schema)?;
                Ok(LoadedInput::Data(if self.standardize {
                    data.standardized()?
                } else {
                    data
                }))
            }
            (None, Some(path)) => {
                if self.standardize {
                    return Err(Error::Unsupported(
                        "--standardize requires raw CSV input".into(),
                    ));
                }
                Ok(LoadedInput::Summary(data_io::load_summary(path)?))
            }
            _ => Err(Error::Schema(
                "exactly one of --input or --summary is required".into(),
            )),
        }
    }
}

#[derive(Args, Debug)]
struct CiArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Significance level [default: 0.05].
    #[arg(long)]
    alpha: Option<f64>,
    /// Identification rule [default: plurality].
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Coefficient draws M for the sampling interval [default: 1000].
    #[arg(long, alias = "M")]
    samples: Option<usize>,
    /// Bootstrap replicates K for threshold calibration [default: 1000].
    #[arg(long, alias = "K")]
    bootstrap_reps: Option<usize>,
    /// Threshold calibration method [default: bootstrap].
    #[arg(long, value_enum)]
    rho_method: Option<RhoArg>,
    /// Grid spacing exponent a (step = n^-a) [default: 0.6].
    #[arg(long)]
    grid_exponent: Option<f64>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Shrink factor: "auto" or a positive number [default: auto].
    #[arg(long)]
    lambda: Option<String>,
    /// Heteroscedasticity-robust covariance (raw data only).
    #[arg(long)]
    robust: bool,
    /// Include the voting matrix in the selection diagnostics.
    #[arg(long)]
    emit_selection: bool,
    /// Include every per-draw interval in the sampling record.
    #[arg(long)]
    emit_samples: bool,
    /// Use this valid set (1-based instrument positions, comma separated)
    /// instead of the voted one.
    #[arg(long, value_delimiter = ',')]
    valid_set: Option<Vec<usize>>,
    /// JSON file with the same fields as the flags; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config-file mirror of the `ci` flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    alpha: Option<f64>,
    mode: Option<String>,
    samples: Option<usize>,
    bootstrap_reps: Option<usize>,
    rho_method: Option<String>,
    grid_exponent: Option<f64>,
    seed: Option<u64>,
    lambda: Option<LambdaField>,
    robust: Option<bool>,
    emit_selection: Option<bool>,
    emit_samples: Option<bool>,
    valid_set: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LambdaField {
    Value(f64),
    Text(String),
}

fn parse_mode(text: &str) -> Result<Mode, Error> {
    match text.to_ascii_lowercase().as_str() {
        "majority" => Ok(Mode::Majority),
        "plurality" => Ok(Mode::Plurality),
        other => Err(Error::Parameter(format!("unknown mode '{other}'"))),
    }
}

fn parse_rho_method(text: &str) -> Result<RhoMethod, Error> {
    match text.to_ascii_lowercase().replace('-', "_").as_str() {
        "bootstrap" => Ok(RhoMethod::Bootstrap),
        "bonferroni" => Ok(RhoMethod::Bonferroni),
        "sqrt_log" => Ok(RhoMethod::SqrtLog),
        other => Err(Error::Parameter(format!("unknown rho method '{other}'"))),
    }
}

fn parse_lambda(text: &str) -> Result<LambdaRule, Error> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(LambdaRule::Auto);
    }
    let value: f64 = text
        .parse()
        .map_err(|_| Error::Parameter(format!("lambda must be 'auto' or a number, got '{text}'")))?;
    Ok(LambdaRule::Fixed(value))
}

/// 1-based user indices to 0-based internal ones, bounds-checked.
fn to_zero_based(indices: &[usize], p_z: usize) -> Result<Vec<usize>, Error> {
    indices
        .iter()
        .map(|&i| {
            if i == 0 || i > p_z {
                Err(Error::Containment(format!(
                    "--valid-set index {i} is outside 1..={p_z}"
                )))
            } else {
                Ok(i - 1)
            }
        })
        .collect()
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_ci(args: CiArgs) -> Result<i32, Error> {
    let file: ConfigFile = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ConfigFile::default(),
    };

    let defaults = AnalysisConfig::default();
    let mode = match (args.mode, file.mode.as_deref()) {
        (Some(m), _) => m.into(),
        (None, Some(m)) => parse_mode(m)?,
        (None, None) => defaults.mode,
    };
    let rho_method = match (args.rho_method, file.rho_method.as_deref()) {
        (Some(m), _) => m.into(),
        (None, Some(m)) => parse_rho_method(m)?,
        (None, None) => defaults.rho_method,
    };
    let lambda = match (args.lambda.as_deref(), file.lambda.as_ref()) {
        (Some(text), _) => parse_lambda(text)?,
        (None, Some(LambdaField::Value(v))) => LambdaRule::Fixed(*v),
        (None, Some(LambdaField::Text(text))) => parse_lambda(text)?,
        (None, None) => defaults.lambda,
    };
    let valid_set_user = args.valid_set.clone().or(file.valid_set.clone());
    let emit_selection = args.emit_selection || file.emit_selection.unwrap_or(false);
    let emit_samples = args.emit_samples || file.emit_samples.unwrap_or(false);

    let input = args.input.load()?;
    let p_z = match &input {
        LoadedInput::Data(data) => data.p_z(),
        LoadedInput::Summary(stats) => stats.p_z,
    };
    let config = AnalysisConfig {
        alpha: args.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        mode,
        m: args.samples.or(file.samples).unwrap_or(defaults.m),
        bootstrap_k: args
            .bootstrap_reps
            .or(file.bootstrap_reps)
            .unwrap_or(defaults.bootstrap_k),
        rho_method,
        grid_exponent: args
            .grid_exponent
            .or(file.grid_exponent)
            .unwrap_or(defaults.grid_exponent),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        valid_set: valid_set_user
            .as_deref()
            .map(|v| to_zero_based(v, p_z))
            .transpose()?,
        lambda,
        robust: args.robust || file.robust.unwrap_or(false),
    };

    let result = match &input {
        LoadedInput::Data(data) => analyze(AnalysisInput::Data(data), &config)?,
        LoadedInput::Summary(stats) => analyze(AnalysisInput::Summary(stats), &config)?,
    };

    let report = output::ci_report(&result, emit_selection, emit_samples);
    let text = serde_json::to_string_pretty(&report)?;
    write_or_print(&text, args.out.as_deref())?;

    if result.searching.empty && result.sampling.ci.empty {
        Ok(2)
    } else {
        Ok(0)
    }
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Heteroscedasticity-robust covariance (raw data only).
    #[arg(long)]
    robust: bool,
    /// Include the voting matrix in the output.
    #[arg(long)]
    emit_selection: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_select(args: SelectArgs) -> Result<i32, Error> {
    let fit = match args.input.load()? {
        LoadedInput::Data(data) => {
            let fit = fit_ols(&data)?;
            if args.robust {
                fit.with_robust_covariance(&data)?
            } else {
                fit
            }
        }
        LoadedInput::Summary(stats) => {
            if args.robust {
                return Err(Error::Unsupported(
                    "robust covariance needs raw data, not summary statistics".into(),
                ));
            }
            riv_core::reduced_form::fit_from_summary(&stats)?
        }
    };
    let selection = select_tsht(&fit)?;
    let record = output::selection_record(&selection, args.emit_selection);
    let text = serde_json::to_string_pretty(&record)?;
    write_or_print(&text, args.out.as_deref())?;
    Ok(0)
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Setting name: S1..S5, CIIV1, CIIV2.
    #[arg(long)]
    setting: String,
    /// Instrument strengths to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5])]
    gamma0: Vec<f64>,
    /// Invalidity levels to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2])]
    tau: Vec<f64>,
    /// Sample sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2000])]
    n: Vec<usize>,
    /// Replications per cell.
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Methods to compare, comma separated:
    /// searching, sampling, oracle, naive.
    #[arg(long, value_delimiter = ',', default_value = "searching,sampling,oracle,naive")]
    methods: Vec<String>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Identification rule.
    #[arg(long, value_enum, default_value_t = ModeArg::Plurality)]
    mode: ModeArg,
    /// Coefficient draws M for the sampling interval.
    #[arg(long, alias = "M", default_value_t = 1000)]
    samples: usize,
    /// Bootstrap replicates K for threshold calibration.
    #[arg(long, default_value_t = 1000)]
    bootstrap_reps: usize,
    /// Threshold calibration method.
    #[arg(long, value_enum, default_value_t = RhoArg::Bootstrap)]
    rho_method: RhoArg,
    /// Grid spacing exponent.
    #[arg(long, default_value_t = 0.6)]
    grid_exponent: f64,
    /// Output shape.
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, Error> {
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(Error::Parameter("at least one method is required".into()));
    }
    let analysis = AnalysisConfig {
        alpha: args.alpha,
        mode: args.mode.into(),
        m: args.samples,
        bootstrap_k: args.bootstrap_reps,
        rho_method: args.rho_method.into(),
        grid_exponent: args.grid_exponent,
        ..AnalysisConfig::default()
    };

    let mut reports = Vec::new();
    let mut cell = 0u64;
    for &gamma0 in &args.gamma0 {
        for &tau in &args.tau {
            for &n in &args.n {
                let setting = build_setting(&args.setting, gamma0, tau, n)?;
                let master = derive_seed(args.seed, cell);
                reports.push(run_replications(
                    &setting,
                    &methods,
                    args.reps,
                    master,
                    &analysis,
                )?);
                cell += 1;
            }
        }
    }

    let format = match args.format {
        FormatArg::Csv => TableFormat::Csv,
        FormatArg::Text => TableFormat::Text,
    };
    let table = emit_table(&reports, format)?;
    match &args.out {
        Some(path) => std::fs::write(path, &table)?,
        None => print!("{table}"),
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Commands::Ci(args) => cmd_ci(args),
        Commands::Select(args) => cmd_select(args),
        Commands::Simulate(args) => cmd_simulate(args),
    }
}

fn main() {
    // RIV_THREADS caps internal parallelism; results do not depend on it.
    if let Ok(text) = std::env::var("RIV_THREADS") {
        if let Ok(threads) = text.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }

    // Exit 1 on bad flags or values; exit 2 is reserved for an analysis whose
    // intervals came back empty.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err)
            if matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{err}");
            std::process::exit(0);
        }
        Err(err) => {
            eprint!("{err}");
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            let record = output::ErrorRecord {
                error: output::ErrorBody {
                    kind: output::error_kind(&err),
                    message: err.to_string(),
                },
            };
            eprintln!(
                "{}",
                serde_json::to_string(&record).unwrap_or_else(|_| err.to_string())
            );
            std::process::exit(1);
        }
    }
}
