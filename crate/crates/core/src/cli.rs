//! Command-line front end. JSON goes to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gram::{fit_gram_and_eigenvalues_with, gram_fit_options, GramConfig};
use crate::harness::{
    io, run_coverage, CoverageConfig, EstimatorId, Family, MatrixSpec, RegressionSpec, Scenario, VectorSpec,
};
use crate::matrix_mean::{fit_matrix_combined_with, fit_matrix_operator_with, MatMomentBounds, McConfig};
use crate::regression::{
    build_plugin, select_model_general, select_model_nested, ModelFamily, RegionSpec, RegressionBounds,
};
use crate::vector_mean::{
    estimate_mean_adaptive, estimate_mean_uncentered_with, AdaptiveGrid, FitOptions, VecMomentBounds,
};

pub const SCHEMA: &str = "1";
pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UNCERTIFIED: i32 = 3;

const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Parser)]
#[command(name = "heavytail", version, about = "Robust estimators with dimension-free deviation bounds")]
struct Cli {
    /// Seed of every randomized step; defaults to $HEAVYTAIL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exit with status 3 when the result is not certified.
    #[arg(long, global = true)]
    require_certified: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean of a random vector (one observation per CSV row).
    Mean(MeanArgs),
    /// Mean of a random matrix in operator norm (rows flattened row-major).
    MatrixMean(MatrixArgs),
    /// Gram matrix dominating the directional lower bounds.
    Gram(GramArgs),
    /// Robust ridge regression with a confidence region (last column is Y).
    Regress(RegressArgs),
    /// Coverage experiment on synthetic data.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct MeanArgs {
    #[arg(long)]
    input: PathBuf,
    /// Bound on `sup_theta E <theta, X>^2`.
    #[arg(long)]
    v: Option<f64>,
    /// Bound on `E |X|^2`.
    #[arg(long = "T")]
    t: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Use the scale-adaptive estimator; `--v`/`--T` then only set the reported radius.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 1.0)]
    sigma_guess: f64,
    #[arg(long, default_value_t = std::f64::consts::E)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct MatrixArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    v: f64,
    #[arg(long = "t")]
    t_small: f64,
    #[arg(long)]
    u: f64,
    /// Bound on `E |M|_HS^2`.
    #[arg(long = "T")]
    t_hs: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Monte-Carlo draws of the residual term.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    /// Also enforce the Hilbert-Schmidt radius.
    #[arg(long)]
    combined: bool,
}

#[derive(Debug, Args)]
struct GramArgs {
    #[arg(long)]
    input: PathBuf,
    /// Bound on `E |X|^4`.
    #[arg(long, alias = "T")]
    fourth_moment_bound: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
}

#[derive(Debug, Args)]
struct RegressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// JSON file with `v`, `T`, `v'` and `T'`.
    #[arg(long)]
    bounds: PathBuf,
    /// `none`, `nested:1,2,4` (leading coordinate blocks) or `supports:0;0,1;2`.
    #[arg(long, default_value = "none")]
    family: String,
    #[arg(long)]
    norm_cap: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// `gaussian`, `student_t`, `pareto_tail` or `contaminated`.
    #[arg(long, default_value = "gaussian")]
    scenario: String,
    /// `mean`, `matrix-mean`, `gram` or `regress`.
    #[arg(long, default_value = "mean")]
    estimator: String,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    rows: usize,
    #[arg(long, default_value_t = 2)]
    cols: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Ridge parameter of the regression scenario.
    #[arg(long, default_value_t = 0.1)]
    ridge: f64,
    #[arg(long, default_value_t = 64)]
    draws: usize,
    #[arg(long, default_value_t = 50)]
    directions: usize,
    /// Keep the wall time in the report (the output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

struct Outcome {
    json: serde_json::Value,
    certified: bool,
}

fn outcome<T: Serialize>(body: &T, certified: bool) -> Result<Outcome> {
    Ok(Outcome { json: serde_json::to_value(Versioned { schema: SCHEMA, body })?, certified })
}

fn default_seed() -> Result<u64> {
    match std::env::var("HEAVYTAIL_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("HEAVYTAIL_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn required(x: Option<f64>, flag: &str) -> Result<f64> {
    x.ok_or_else(|| Error::InvalidInput(format!("missing --{flag}")))
}

fn mean(a: &MeanArgs, seed: u64) -> Result<Outcome> {
    let sample = io::read_vector_file(&a.input)?;
    let opts = FitOptions { seed, ..FitOptions::default() };
    let bounds = match (a.v, a.t) {
        (Some(v), Some(t)) => Some(VecMomentBounds::new(v, t)?),
        (None, None) if a.adaptive => None,
        _ => return Err(Error::InvalidInput("--v and --T must be given together".into())),
    };
    let est = if a.adaptive {
        let grid = AdaptiveGrid::new(a.sigma_guess, a.alpha, sample.n())?;
        estimate_mean_adaptive(&sample, &grid, a.delta, bounds, &opts)?
    } else {
        estimate_mean_uncentered_with(&sample, bounds.expect("checked above"), a.delta, &opts)?
    };
    outcome(&est, est.certified)
}

fn matrix_mean(a: &MatrixArgs, seed: u64) -> Result<Outcome> {
    let sample = io::read_matrix_file(&a.input, a.rows, a.cols)?;
    let bounds = MatMomentBounds::new(a.v, a.t_small, a.u, a.t_hs)?;
    let mc = McConfig::new(a.draws, seed)?;
    let opts = FitOptions { seed, ..FitOptions::default() };
    let est = if a.combined {
        fit_matrix_combined_with(&sample, bounds, a.delta, mc, &opts)?
    } else {
        fit_matrix_operator_with(&sample, bounds, a.delta, mc, &opts)?
    };
    outcome(&est, est.certified)
}

#[derive(Serialize)]
struct GramOutput {
    #[serde(rename = "G_hat")]
    g_hat: Vec<Vec<f64>>,
    sup_gap: f64,
    sigma_hat: Vec<f64>,
    certified: bool,
    delta: f64,
}

fn gram(a: &GramArgs, seed: u64) -> Result<Outcome> {
    let sample = io::read_vector_file(&a.input)?;
    let config = GramConfig::new(a.fourth_moment_bound, a.delta)?;
    let opts = FitOptions { seed, ..gram_fit_options() };
    let (fit, eig) = fit_gram_and_eigenvalues_with(&sample, &config, &opts)?;
    let out = GramOutput {
        g_hat: fit.g_hat,
        sup_gap: fit.sup_gap,
        sigma_hat: eig.sigma_hat,
        certified: fit.certified,
        delta: fit.delta,
    };
    outcome(&out, out.certified)
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::InvalidInput(format!("cannot parse `{t}` as an index"))))
        .collect()
}

/// The family and whether the nested selection rule applies.
fn parse_family(spec: &str, d: usize) -> Result<Option<(ModelFamily, bool)>> {
    let spec = spec.trim();
    if spec == "none" {
        return Ok(None);
    }
    if let Some(rest) = spec.strip_prefix("nested:") {
        return Ok(Some((ModelFamily::nested_coordinates(d, &parse_list(rest)?)?, true)));
    }
    if let Some(rest) = spec.strip_prefix("supports:") {
        let supports = rest.split(';').map(parse_list).collect::<Result<Vec<_>>>()?;
        return Ok(Some((ModelFamily::coordinate_supports(d, supports)?, false)));
    }
    Err(Error::InvalidInput(format!("unknown model family `{spec}`; expected none, nested:... or supports:...")))
}

#[derive(Serialize)]
struct Region {
    epsilon: f64,
    eta: f64,
}

#[derive(Serialize)]
struct RegressOutput {
    theta: Vec<f64>,
    lambda: f64,
    region: Region,
    model: Option<crate::regression::ModelSelection>,
    bounds: RegressionBounds,
    delta: f64,
    certified: bool,
}

fn regress(a: &RegressArgs, seed: u64) -> Result<Outcome> {
    let data = io::read_regression_file(&a.input)?;
    let bounds: RegressionBounds = serde_json::from_reader(std::fs::File::open(&a.bounds)?)?;
    let bounds = RegressionBounds::new(bounds.v, bounds.t, bounds.v_prime, bounds.t_prime)?;
    let family = parse_family(&a.family, data.d())?;
    if family.is_some() && a.norm_cap.is_none() {
        return Err(Error::InvalidInput("model selection needs --norm-cap".into()));
    }
    let mc = McConfig::new(a.draws, seed)?;
    let opts = FitOptions { seed, ..FitOptions::default() };
    let plugin = build_plugin(&data, bounds, a.delta, mc, &opts)?;
    let (epsilon, eta, delta, certified) = (plugin.epsilon, plugin.eta, plugin.delta, plugin.certified);
    let region = RegionSpec::fit(plugin, a.ridge, a.norm_cap)?;
    let model = match &family {
        None => None,
        Some((f, true)) => Some(select_model_nested(&region, f)?),
        Some((f, false)) => Some(select_model_general(&region, f)?),
    };
    let out = RegressOutput {
        theta: region.theta_hat.clone(),
        lambda: a.ridge,
        region: Region { epsilon, eta },
        model,
        bounds,
        delta,
        certified,
    };
    outcome(&out, certified)
}

fn family_of(a: &SimulateArgs) -> Result<Family> {
    let f = match a.scenario.as_str() {
        "gaussian" => Family::Gaussian,
        "student_t" | "student-t" => Family::StudentT { nu: required(a.nu, "nu")? },
        "pareto_tail" | "pareto-tail" => Family::ParetoTail { a: required(a.a, "a")? },
        "contaminated" => {
            Family::Contaminated { p_out: required(a.p_out, "p-out")?, scale: required(a.scale, "scale")? }
        }
        other => return Err(Error::InvalidInput(format!("unknown scenario `{other}`"))),
    };
    f.validate()?;
    Ok(f)
}

fn simulate(a: &SimulateArgs, seed: u64) -> Result<Outcome> {
    let family = family_of(a)?;
    let estimator: EstimatorId = a.estimator.parse()?;
    let scenario = match estimator {
        EstimatorId::VectorMean | EstimatorId::Gram => Scenario::Vector(VectorSpec::isotropic(family, a.n, a.d)),
        EstimatorId::MatrixOperator => Scenario::Matrix(MatrixSpec {
            family,
            n: a.n,
            p: a.rows,
            q: a.cols,
            mean: vec![0.0; a.rows * a.cols],
            scale: 1.0,
        }),
        EstimatorId::RegressionRegion => Scenario::Regression {
            spec: RegressionSpec {
                x: VectorSpec::isotropic(Family::Gaussian, a.n, a.d),
                theta0: vec![1.0 / (a.d as f64).sqrt(); a.d],
                noise: family,
                noise_scale: 1.0,
            },
            lambda: a.ridge,
        },
    };
    let mut cfg = CoverageConfig::new(a.trials, a.delta, seed);
    cfg.mc_draws = a.draws;
    cfg.directions = a.directions;
    cfg.fit.seed = seed;
    let report = run_coverage(estimator, &scenario, &cfg)?;
    let mut out = outcome(&report, report.uncertified == 0)?;
    if !a.timing {
        if let Some(m) = out.json.as_object_mut() {
            m.remove("wall_time_s");
        }
    }
    Ok(out)
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let seed = match cli.seed {
        Some(s) => s,
        None => default_seed()?,
    };
    match &cli.command {
        Command::Mean(a) => mean(a, seed),
        Command::MatrixMean(a) => matrix_mean(a, seed),
        Command::Gram(a) => gram(a, seed),
        Command::Regress(a) => regress(a, seed),
        Command::Simulate(a) => simulate(a, seed),
    }
}

/// Runs the command line `args` (program name first) and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let _ = write!(err, "{}", e.render());
            return EXIT_INPUT;
        }
    };
    match dispatch(&cli) {
        Ok(o) => {
            let text = serde_json::to_string_pretty(&o.json).expect("JSON values always serialize");
            let _ = writeln!(out, "{text}");
            if cli.require_certified && !o.certified {
                let _ = writeln!(err, "heavytail: result is not certified");
                return EXIT_UNCERTIFIED;
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "heavytail: {e}");
            EXIT_INPUT
        }
    }
}
