use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use composite_ate::analysis::{estimate, AnalysisSpec, Estimator};
use composite_ate::covadj::RChoice;
use composite_ate::dataset::{load_csv, Roles};
use composite_ate::design::Design;
use composite_ate::inference::{CiMethod, CiSpec};
use composite_ate::invlogit::NULL_ONLY;
use composite_ate::montecarlo::{run_study, Dgp};
use composite_ate::obs::WeightSource;
use composite_ate::report::{format_f64, to_json_string, AnalysisReport, ErrorReport};
use composite_ate::wchi2::WeightedChiSq;
use composite_ate::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "composite-ate", version, about = "Composite treatment effects for multiple outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, test and build an interval for one CSV data set.
    Analyze(AnalyzeArgs),
    /// Run a simulation study described by a TOML spec.
    Simulate(SimulateArgs),
    /// Evaluate the weighted chi-squared law.
    Wchi2(Wchi2Args),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    treatment: String,
    #[arg(long, value_delimiter = ',', required = true)]
    outcomes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long)]
    stratum: Option<String>,
    /// Known inverse-propensity weights (obs only).
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    design: Design,
    /// Covariate-adjusted estimator.
    #[arg(long)]
    adjust: bool,
    /// Inverse logistic regression composite (test only, no interval).
    #[arg(long, conflicts_with = "adjust")]
    inverse_logistic: bool,
    /// Covariate coefficient r for adjusted stratified fits: a number or "opt".
    #[arg(long, default_value = "0")]
    r: RChoice,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "auto")]
    ci: CiMethod,
    /// Pre-test level of the two-step interval; defaults to alpha / 2.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "query")]
struct Wchi2Query {
    #[arg(long, group = "query")]
    cdf: Option<f64>,
    #[arg(long, group = "query")]
    quantile: Option<f64>,
}

#[derive(Args)]
struct Wchi2Args {
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    lambdas: Vec<f64>,
    #[command(flatten)]
    query: Wchi2Query,
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(Error::Io),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::InvalidSpec("--alpha must lie in (0, 1)".into()));
    }
    let stratified = matches!(a.design, Design::SreReg | Design::SreStrat);
    if stratified && a.stratum.is_none() {
        return Err(Error::InvalidSpec(format!("design {} requires --stratum", a.design.as_str())));
    }
    if !stratified && a.stratum.is_some() {
        return Err(Error::InvalidSpec("--stratum applies to sre designs only".into()));
    }
    if a.design == Design::Obs && a.covariates.is_empty() && a.weights.is_none() {
        return Err(Error::InvalidSpec("obs requires covariates or weights".into()));
    }
    if a.design != Design::Obs && a.weights.is_some() {
        return Err(Error::InvalidSpec("--weights applies to the obs design only".into()));
    }
    if a.adjust && a.covariates.is_empty() {
        return Err(Error::InvalidSpec("--adjust requires --covariates".into()));
    }
    let estimator = if a.adjust {
        Estimator::Adjusted
    } else if a.inverse_logistic {
        Estimator::InverseLogistic
    } else {
        Estimator::Standard
    };
    let spec = AnalysisSpec {
        design: a.design,
        estimator,
        weights: if a.weights.is_some() { WeightSource::User } else { WeightSource::Estimate },
        r: a.r,
    };
    spec.validate()?;
    let roles = Roles {
        treatment: a.treatment,
        outcomes: a.outcomes,
        covariates: a.covariates,
        stratum: a.stratum,
        weights: a.weights,
    };
    let data = load_csv(&a.data, &roles)?;
    let est = estimate(&data, spec)?;
    let ci = if estimator == Estimator::InverseLogistic {
        Err(format!("no interval: {NULL_ONLY}"))
    } else {
        Ok(est.interval(&data, &CiSpec { method: a.ci, alpha: a.alpha, eta: a.eta })?)
    };
    let report = AnalysisReport::new(&data, &est, ci);
    emit(&to_json_string(&report)?, a.out.as_ref())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(Error::Io)?;
    let mut spec: composite_ate::montecarlo::DgpSpec =
        toml::from_str(&text).map_err(|e| Error::InvalidSpec(format!("spec file: {e}")))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let dgp = Dgp::new(spec)?;
    let summary = run_study(&dgp, a.reps)?;
    emit(&to_json_string(&summary)?, a.out.as_ref())
}

fn wchi2(a: Wchi2Args) -> Result<()> {
    let law = WeightedChiSq::new(&a.lambdas)?;
    let v = match (a.query.cdf, a.query.quantile) {
        (Some(t), None) => law.cdf(t)?,
        (None, Some(p)) => law.quantile(p)?,
        _ => return Err(Error::InvalidSpec("give exactly one of --cdf or --quantile".into())),
    };
    println!("{}", format_f64(v));
    Ok(())
}

fn fail(e: &Error) -> ExitCode {
    let body = to_json_string(&ErrorReport::new(e)).unwrap_or_else(|_| format!("{{\"error\": \"{e}\"}}\n"));
    eprint!("{body}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&Error::InvalidSpec(e.kind().to_string()));
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Wchi2(a) => wchi2(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
