use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixsel::caic::{caic_with, CaicOptions, GConvention, BOUNDARY_TOL};
use mixsel::estimation::{fit_model, Family, FitOptions, FittedModel};
use mixsel::formula::{parse_formula, parse_rhs, BasisType};
use mixsel::stepwise::{step_caic, Direction, Keep, StepConfig};
use mixsel::{load_csv, Error};

mod report;

use report::{CaicReport, FitReport, StepReport};

#[derive(Parser, Debug)]
#[command(name = "mixsel", version, about = "Mixed models with conditional AIC and stepwise selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and print a summary.
    Fit(Common),
    /// Fit a model and compute its conditional AIC.
    Caic(Common),
    /// Stepwise model selection by conditional AIC.
    Step {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        step: StepArgs,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Model formula, e.g. "y ~ x + (1 | g)".
    #[arg(long)]
    formula: String,
    #[arg(long, default_value = "gaussian")]
    family: String,
    /// Maximum likelihood instead of REML (gaussian only).
    #[arg(long)]
    ml: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Worker threads for refits and candidate fits.
    #[arg(long, env = "MIXSEL_THREADS")]
    threads: Option<usize>,
    /// Boundary tolerance on the relative covariance factor.
    #[arg(long, default_value_t = BOUNDARY_TOL)]
    boundary_tol: f64,
    /// Form of the covariance-parameter correction for gaussian models.
    #[arg(long, value_enum, default_value_t = Convention::Reference)]
    convention: Convention,
}

#[derive(Args, Debug)]
struct StepArgs {
    #[arg(long, default_value = "backward")]
    direction: String,
    #[arg(long, value_delimiter = ',')]
    group_candidates: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    slope_candidates: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    fix_ef: Vec<String>,
    /// Fixed terms left untouched, e.g. "~ s(x0) + x2".
    #[arg(long)]
    keep_fixed: Option<String>,
    /// Random terms left untouched, e.g. "~ (1 | fac)".
    #[arg(long)]
    keep_random: Option<String>,
    #[arg(long, default_value_t = 2)]
    max_slopes: usize,
    #[arg(long)]
    allow_use_across: bool,
    #[arg(long)]
    calc_non_optim: bool,
    #[arg(long, default_value = "trunc")]
    bs_type: String,
    /// Print the candidate table of every step.
    #[arg(long)]
    trace: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Table,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Convention {
    Reference,
    Exact,
}

/// Failure with its exit status: 1 for numerical failures, 2 for bad input.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_numerical() { 1 } else { 2 }, message: e.to_string() }
    }
}

fn input_error(message: String) -> Failure {
    Failure { code: 2, message }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<String, Failure> {
    let common = match &cli.command {
        Command::Fit(c) | Command::Caic(c) => c,
        Command::Step { common, .. } => common,
    };
    let threads = common.threads.unwrap_or(1);
    if threads == 0 {
        return Err(input_error("thread count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| input_error(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(c) => cmd_fit(c),
        Command::Caic(c) => cmd_caic(c),
        Command::Step { common, step } => cmd_step(common, step, threads),
    })
}

fn fit(c: &Common) -> Result<FittedModel, Failure> {
    if !c.data.exists() {
        return Err(input_error(format!("data file {} does not exist", c.data.display())));
    }
    let data = Arc::new(load_csv(&c.data)?);
    let formula = parse_formula(&c.formula)?;
    let family: Family = c.family.parse()?;
    let opts = FitOptions { reml: !c.ml, ..Default::default() };
    Ok(fit_model(&formula, data, family, &opts)?)
}

fn caic_options(c: &Common) -> Result<CaicOptions, Failure> {
    if !(c.boundary_tol >= 0.0) {
        return Err(input_error("boundary tolerance must be non-negative".into()));
    }
    Ok(CaicOptions {
        boundary_tol: c.boundary_tol,
        convention: match c.convention {
            Convention::Reference => GConvention::Reference,
            Convention::Exact => GConvention::Exact,
        },
    })
}

fn emit<T: serde::Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> Result<String, Failure> {
    match format {
        Format::Table => Ok(table()),
        Format::Json => serde_json::to_string_pretty(value)
            .map(|s| s + "\n")
            .map_err(|e| Failure { code: 1, message: e.to_string() }),
    }
}

fn cmd_fit(c: &Common) -> Result<String, Failure> {
    let m = fit(c)?;
    let r = FitReport::new(&m);
    emit(c.format, &r, || r.table())
}

fn cmd_caic(c: &Common) -> Result<String, Failure> {
    let opts = caic_options(c)?;
    let m = fit(c)?;
    let r = CaicReport::from(&caic_with(&m, &opts)?.result);
    emit(c.format, &r, || r.table())
}

fn cmd_step(c: &Common, s: &StepArgs, threads: usize) -> Result<String, Failure> {
    let caic = caic_options(c)?;
    let keep = Keep {
        fixed: s.keep_fixed.as_deref().map(parse_rhs).transpose()?,
        random: s.keep_random.as_deref().map(parse_rhs).transpose()?,
    };
    let cfg = StepConfig {
        direction: s.direction.parse::<Direction>()?,
        group_candidates: s.group_candidates.clone(),
        slope_candidates: s.slope_candidates.clone(),
        fix_ef: s.fix_ef.clone(),
        keep,
        max_slopes: s.max_slopes,
        allow_use_across: s.allow_use_across,
        calc_non_optim: s.calc_non_optim,
        bs_type: BasisType::from_label(&s.bs_type),
        num_cores: threads,
        trace: false,
        caic,
    };
    let m = fit(c)?;
    let out = step_caic(&m, &cfg)?;
    let r = StepReport { trace: out.trace, best: CaicReport::from(&out.caic) };
    emit(c.format, &r, || r.table(s.trace))
}
