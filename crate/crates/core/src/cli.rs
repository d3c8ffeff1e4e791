//! `fpdelta` command line.
//!
//! Every successful run writes one JSON report
//! `{tool_version, subcommand, config, results}`. Usage errors exit with 2,
//! computation errors with 1 and a JSON error object on standard output.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::asymptotics::{condition_trace, DesignRule, PopulationSequence};
use crate::design::{check_margin, draw_assignment, sample_size, Assignment, DEFAULT_ENUM_CAP};
use crate::error::{Error, Result};
use crate::functionals::{builtin, SmoothFunctional};
use crate::population::{load_population, moments, PopulationKind, PotentialPopulation};
use crate::simulate::{self, draws_csv, exact_distribution_with_cap, ReplicationOptions};
use crate::variance::{
    arm_covariance_matrix, confidence_interval, delta_variance, neyman_plugin_variance, observed_arms,
    observed_sample, ratio_variance, srs_plugin_variance,
};
use crate::TOOL_VERSION;

/// Environment variable overriding the enumeration cap.
pub const ENUM_CAP_VAR: &str = "FPDELTA_ENUM_CAP";

#[derive(Debug, Parser)]
#[command(name = "fpdelta", version, about = "Finite-population delta-method variances and randomization checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Population moments (means, variances, max squared deviations, cross-moment).
    Moments(PopArgs),
    /// Point estimate, plug-in variance and interval for one assignment.
    Estimate(EstimateArgs),
    /// Delta-method variance with all three representations.
    Variance(DesignedArgs),
    /// Exact randomization distribution by full enumeration.
    Enumerate(DesignedArgs),
    /// Monte Carlo replication of the standardized estimator.
    Simulate(SimulateArgs),
    /// Monte Carlo coverage of plug-in confidence intervals.
    Coverage(CoverageArgs),
    /// Regularity-condition trace over tiled copies of the population.
    Conditions(ConditionsArgs),
}

#[derive(Debug, Args)]
struct PopArgs {
    /// CSV file with header `id,y0` or `id,y0,y1`.
    #[arg(long = "pop", value_name = "CSV")]
    pop: PathBuf,
    /// Override the kind inferred from the columns.
    #[arg(long, value_parser = ["survey", "experiment"])]
    kind: Option<String>,
    /// Write the JSON report here instead of standard output.
    #[arg(long, short = 'o', value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "design", required = true, multiple = false)]
struct DesignArgs {
    /// Treated count (experiment) or sample size (survey).
    #[arg(long, group = "design")]
    n1: Option<usize>,
    /// Sample size; same as --n1.
    #[arg(long, group = "design")]
    n: Option<usize>,
    /// Proportion; resolved to ceil(p N).
    #[arg(long, group = "design")]
    p: Option<f64>,
}

#[derive(Debug, Args)]
struct DesignedArgs {
    #[command(flatten)]
    pop: PopArgs,
    #[arg(long)]
    functional: String,
    #[command(flatten)]
    design: DesignArgs,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    base: DesignedArgs,
    /// Assignment as a 0/1 string; drawn from --seed when absent.
    #[arg(long)]
    z: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    base: DesignedArgs,
    /// Number of replications.
    #[arg(long = "R", value_name = "R")]
    replications: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads. Affects wall time only.
    #[arg(long)]
    workers: Option<usize>,
    /// Dump per-replicate draws as CSV.
    #[arg(long, value_name = "PATH")]
    draws_csv: Option<PathBuf>,
    /// Include wall time in the report (makes output run-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[command(flatten)]
    sim: SimulateArgs,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Debug, Args)]
struct ConditionsArgs {
    #[command(flatten)]
    pop: PopArgs,
    /// Tiling factors, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    /// Per-copy margin; population k uses k * n1.
    #[arg(long, conflicts_with = "p")]
    n1: Option<usize>,
    /// Proportion; population k uses ceil(p N_k).
    #[arg(long)]
    p: Option<f64>,
    /// Dump the trace as CSV.
    #[arg(long, value_name = "PATH")]
    trace_csv: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize)]
struct ConfigEcho {
    population: String,
    kind: Option<PopulationKind>,
    n_units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    functional: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    margin: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replications: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ks: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    enum_cap: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<Assignment>,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    tool_version: &'static str,
    subcommand: &'a str,
    config: ConfigEcho,
    results: T,
}

#[derive(Serialize)]
struct ErrorObject<'a> {
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    subcommand: Option<&'a str>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    tool_version: &'static str,
    error: ErrorObject<'a>,
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{e}");
                    2
                }
            };
        }
    };
    let name = subcommand_name(&cli.command);
    let (output, rendered) = match dispatch(&cli.command) {
        Ok(done) => done,
        Err(Failure::Usage(message)) => {
            let _ = writeln!(err, "error: {message}");
            return 2;
        }
        Err(Failure::Compute(e)) => {
            let report = ErrorReport {
                tool_version: TOOL_VERSION,
                error: ErrorObject {
                    kind: e.kind(),
                    message: e.to_string(),
                    subcommand: Some(name),
                },
            };
            let _ = writeln!(err, "error: {e}");
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            return 1;
        }
    };
    let written = match output {
        Some(path) => File::create(path).and_then(|mut f| writeln!(f, "{rendered}")),
        None => writeln!(out, "{rendered}"),
    };
    match written {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: cannot write report: {e}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Compute(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Compute(e)
    }
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Moments(_) => "moments",
        Command::Estimate(_) => "estimate",
        Command::Variance(_) => "variance",
        Command::Enumerate(_) => "enumerate",
        Command::Simulate(_) => "simulate",
        Command::Coverage(_) => "coverage",
        Command::Conditions(_) => "conditions",
    }
}

fn load(args: &PopArgs) -> std::result::Result<(PotentialPopulation, ConfigEcho), Failure> {
    let kind = args
        .kind
        .as_deref()
        .map(str::parse::<PopulationKind>)
        .transpose()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let file = File::open(&args.pop).map_err(Error::from)?;
    let pop = load_population(BufReader::new(file), kind)?;
    let echo = ConfigEcho {
        population: args.pop.display().to_string(),
        kind: Some(pop.kind()),
        n_units: Some(pop.n_units()),
        ..ConfigEcho::default()
    };
    Ok((pop, echo))
}

fn resolve_margin(design: &DesignArgs, n_units: usize, echo: &mut ConfigEcho) -> Result<usize> {
    let margin = match (design.n1.or(design.n), design.p) {
        (Some(m), _) => {
            check_margin(n_units, m)?;
            m
        }
        (None, Some(p)) => {
            echo.p = Some(p);
            sample_size(n_units, p)?
        }
        (None, None) => unreachable!("clap enforces one design argument"),
    };
    echo.margin = Some(margin);
    Ok(margin)
}

fn functional(name: &str, echo: &mut ConfigEcho) -> Result<SmoothFunctional> {
    echo.functional = Some(name.to_string());
    builtin(name)
}

fn enum_cap() -> std::result::Result<u64, Failure> {
    match std::env::var(ENUM_CAP_VAR) {
        Err(_) => Ok(DEFAULT_ENUM_CAP),
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{ENUM_CAP_VAR} must be a positive integer, got `{raw}`"))),
    }
}

fn render<T: Serialize>(subcommand: &str, config: ConfigEcho, results: T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Report {
        tool_version: TOOL_VERSION,
        subcommand,
        config,
        results,
    })?)
}

type Dispatched = (Option<PathBuf>, String);

fn dispatch(command: &Command) -> std::result::Result<Dispatched, Failure> {
    let name = subcommand_name(command);
    match command {
        Command::Moments(args) => {
            let (pop, echo) = load(args)?;
            Ok((args.output.clone(), render(name, echo, moments(&pop))?))
        }
        Command::Variance(args) => {
            let (pop, mut echo) = load(&args.pop)?;
            let f = functional(&args.functional, &mut echo)?;
            let margin = resolve_margin(&args.design, pop.n_units(), &mut echo)?;
            #[derive(Serialize)]
            struct VarianceResults {
                delta: crate::DeltaVarianceReport,
                #[serde(skip_serializing_if = "Option::is_none")]
                arm_covariance: Option<crate::variance::ArmCovariance>,
                #[serde(skip_serializing_if = "Option::is_none")]
                ratio_closed_form: Option<f64>,
                moments: crate::Moments,
            }
            let experiment = pop.kind() == PopulationKind::Experiment;
            let results = VarianceResults {
                delta: delta_variance(&f, &pop, margin)?,
                arm_covariance: if experiment { Some(arm_covariance_matrix(&pop, margin)?) } else { None },
                ratio_closed_form: if experiment && f.name() == "ratio" {
                    Some(ratio_variance(&pop, margin)?)
                } else {
                    None
                },
                moments: moments(&pop),
            };
            Ok((args.pop.output.clone(), render(name, echo, results)?))
        }
        Command::Enumerate(args) => {
            let (pop, mut echo) = load(&args.pop)?;
            let f = functional(&args.functional, &mut echo)?;
            let margin = resolve_margin(&args.design, pop.n_units(), &mut echo)?;
            let cap = enum_cap()?;
            echo.enum_cap = Some(cap);
            let dist = exact_distribution_with_cap(&pop, &f, margin, cap)?;
            Ok((args.pop.output.clone(), render(name, echo, dist)?))
        }
        Command::Estimate(args) => {
            let (pop, mut echo) = load(&args.base.pop)?;
            let f = functional(&args.base.functional, &mut echo)?;
            let margin = resolve_margin(&args.base.design, pop.n_units(), &mut echo)?;
            let z = match &args.z {
                Some(bits) => {
                    let z = Assignment::parse(bits).map_err(|e| Failure::Usage(e.to_string()))?;
                    if z.n_units() != pop.n_units() || z.margin() != margin {
                        return Err(Failure::Usage(format!(
                            "--z has {} units and {} ones; expected {} and {}",
                            z.n_units(),
                            z.margin(),
                            pop.n_units(),
                            margin
                        )));
                    }
                    z
                }
                None => {
                    echo.seed = Some(args.seed);
                    draw_assignment(pop.n_units(), margin, args.seed)?
                }
            };
            echo.level = Some(args.level);
            echo.assignment = Some(z.clone());
            Ok((args.base.pop.output.clone(), render(name, echo, estimate(&pop, &f, &z, args.level)?)?))
        }
        Command::Simulate(args) => {
            let (pop, mut echo) = load(&args.base.pop)?;
            let f = functional(&args.base.functional, &mut echo)?;
            let margin = resolve_margin(&args.base.design, pop.n_units(), &mut echo)?;
            echo.replications = Some(args.replications);
            echo.seed = Some(args.seed);
            let (run, mut summary) = simulate::simulate(
                &pop,
                &f,
                margin,
                args.replications,
                args.seed,
                ReplicationOptions { workers: args.workers },
            )?;
            if !args.timing {
                summary.wall_time = None;
            }
            if let Some(path) = &args.draws_csv {
                std::fs::write(path, draws_csv(&run)).map_err(Error::from)?;
            }
            Ok((args.base.pop.output.clone(), render(name, echo, summary)?))
        }
        Command::Coverage(args) => {
            let sim = &args.sim;
            let (pop, mut echo) = load(&sim.base.pop)?;
            let f = functional(&sim.base.functional, &mut echo)?;
            let margin = resolve_margin(&sim.base.design, pop.n_units(), &mut echo)?;
            echo.replications = Some(sim.replications);
            echo.seed = Some(sim.seed);
            echo.level = Some(args.level);
            let (run, mut summary) = simulate::coverage(
                &pop,
                &f,
                margin,
                sim.replications,
                args.level,
                sim.seed,
                ReplicationOptions { workers: sim.workers },
            )?;
            if !sim.timing {
                summary.wall_time = None;
            }
            if let Some(path) = &sim.draws_csv {
                std::fs::write(path, draws_csv(&run)).map_err(Error::from)?;
            }
            Ok((sim.base.pop.output.clone(), render(name, echo, summary)?))
        }
        Command::Conditions(args) => {
            let (pop, mut echo) = load(&args.pop)?;
            let base_units = pop.n_units();
            let rule = match (args.n1, args.p) {
                (Some(m), None) => {
                    check_margin(base_units, m)?;
                    echo.margin = Some(m);
                    DesignRule::Custom(std::sync::Arc::new(move |n: usize| Ok(m * n / base_units)))
                }
                (None, Some(p)) => {
                    echo.p = Some(p);
                    DesignRule::CeilProportion(p)
                }
                _ => return Err(Failure::Usage("conditions needs exactly one of --n1 or --p".into())),
            };
            echo.ks = Some(args.ks.clone());
            let trace = condition_trace(&PopulationSequence::tiled(pop, rule), &args.ks)?;
            if let Some(path) = &args.trace_csv {
                std::fs::write(path, trace.to_csv()).map_err(Error::from)?;
            }
            Ok((args.pop.output.clone(), render(name, echo, trace)?))
        }
    }
}

#[derive(Serialize)]
struct EstimateResults {
    estimate: f64,
    truth: f64,
    plugin_variance: f64,
    degenerate_gradient: bool,
    level: f64,
    interval: crate::variance::Interval,
    covers_truth: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed_arms: Option<crate::variance::ObservedArms>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed_sample: Option<crate::variance::ObservedSample>,
}

fn estimate(pop: &PotentialPopulation, f: &SmoothFunctional, z: &Assignment, level: f64) -> Result<EstimateResults> {
    let m = moments(pop);
    let (estimate, truth, plugin, arms, sample) = match pop.kind() {
        PopulationKind::Experiment => {
            let obs = observed_arms(pop, z)?;
            let truth = f.evaluate(&[m.mean0, m.mean1.unwrap_or(f64::NAN)])?;
            (f.evaluate(&obs.means())?, truth, neyman_plugin_variance(&obs, f)?, Some(obs), None)
        }
        PopulationKind::Survey => {
            let obs = observed_sample(pop, z)?;
            let truth = f.evaluate(&[m.mean0])?;
            (f.evaluate(&[obs.ybar])?, truth, srs_plugin_variance(&obs, f)?, None, Some(obs))
        }
    };
    let interval = confidence_interval(estimate, plugin.value, level)?;
    Ok(EstimateResults {
        estimate,
        truth,
        plugin_variance: plugin.value,
        degenerate_gradient: plugin.degenerate_gradient,
        level,
        covers_truth: interval.contains(truth),
        interval,
        observed_arms: arms,
        observed_sample: sample,
    })
}
