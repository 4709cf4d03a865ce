//! `tkde`: sampling, estimation, bandwidth selection, simulation and
//! goodness-of-fit testing with Tweedie kernels.

mod io;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use tweedie_kde::gof::{self, GofConfig, NullModel, TuningPolicy};
use tweedie_kde::kde::{zero_mass_estimate, DEFAULT_GRID_SIZE};
use tweedie_kde::scenarios::{self, EvalGridChoice, ScenarioConfig, ScenarioId};
use tweedie_kde::tuning::{
    default_h_range, GridChoice, DEFAULT_H_COUNT, DEFAULT_P_COUNT, DEFAULT_P_RANGE,
};
use tweedie_kde::tweedie::{self as tw, dispersion_from_zero_mass};
use tweedie_kde::{
    profile_select, seed, with_threads, Error, Estimator, EvaluationGrid, GridSpec, KernelParams,
    PowerParam, SemicontinuousSample, SeriesPolicy, SeriesTable,
};

use manifest::RunManifest;

/// A message for standard error and the process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::AllZeros
            | Error::DegenerateSample(_)
            | Error::DegenerateCurvature
            | Error::DivergentFunctional(_)
            | Error::NonConvergence { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "tkde", version, about = "Tweedie-kernel density estimation for semicontinuous data")]
struct Cli {
    /// Worker threads for parallel work (0 uses every core).
    #[arg(long, global = true, env = "TKDE_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a Tweedie sample.
    Sample(SampleArgs),
    /// Estimate the density of a sample on a grid.
    Estimate(EstimateArgs),
    /// Profile cross-validation over (power, bandwidth) grids.
    Select(SelectArgs),
    /// Monte Carlo study of a benchmark scenario.
    Simulate(SimulateArgs),
    /// Calibrated L2 goodness-of-fit test of a Tweedie law.
    Gof(GofArgs),
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    mu: f64,
    /// Dispersion; derived from --p0 when omitted.
    #[arg(long, conflicts_with = "p0", required_unless_present = "p0")]
    phi: Option<f64>,
    #[arg(long)]
    power: f64,
    /// Target probability of zero.
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Bandwidth; selected by cross-validation when omitted.
    #[arg(long)]
    h: Option<f64>,
    /// Power; selected by cross-validation when omitted.
    #[arg(long)]
    power: Option<f64>,
    /// Upper end of the output grid (default 1.1 times the sample maximum).
    #[arg(long)]
    grid_max: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_P_COUNT)]
    np: usize,
    #[arg(long, default_value_t = DEFAULT_H_COUNT)]
    nh: usize,
    #[arg(long, default_value_t = DEFAULT_P_RANGE.0)]
    pmin: f64,
    #[arg(long, default_value_t = DEFAULT_P_RANGE.1)]
    pmax: f64,
    /// Smallest bandwidth (default scales with the sample median).
    #[arg(long, requires = "hmax")]
    hmin: Option<f64>,
    #[arg(long, requires = "hmin")]
    hmax: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum ScenarioArg {
    M1,
    M2,
    M3,
    M4,
}

impl From<ScenarioArg> for ScenarioId {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::M1 => ScenarioId::M1,
            ScenarioArg::M2 => ScenarioId::M2,
            ScenarioArg::M3 => ScenarioId::M3,
            ScenarioArg::M4 => ScenarioId::M4,
        }
    }
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, ignore_case = true)]
    scenario: ScenarioArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p0: f64,
    #[arg(long)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_P_COUNT)]
    np: usize,
    #[arg(long, default_value_t = DEFAULT_H_COUNT)]
    nh: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PolicyArg {
    Reselect,
    Fixed,
}

#[derive(Args, Serialize)]
struct GofArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mu: f64,
    #[arg(long)]
    phi: f64,
    #[arg(long)]
    power: f64,
    /// Calibration samples.
    #[arg(long = "B", default_value_t = gof::DEFAULT_B)]
    b: usize,
    #[arg(long, default_value_t = gof::DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, value_enum, default_value = "reselect")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    match with_threads(threads, move || run(cli.command, threads)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tkde: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command, threads: usize) -> Outcome {
    match command {
        Command::Sample(a) => sample(a, threads),
        Command::Estimate(a) => estimate(a, threads),
        Command::Select(a) => select(a, threads),
        Command::Simulate(a) => simulate(a, threads),
        Command::Gof(a) => goodness_of_fit(a, threads),
    }
}

fn finish(mut m: RunManifest, out: &Path) -> Outcome {
    m.finished = manifest::now();
    io::write_json(&io::sidecar(out, ".manifest.json"), &m)
}

fn load(path: &Path) -> Outcome<SemicontinuousSample> {
    Ok(SemicontinuousSample::new(io::read_values(path)?)?)
}

fn sample(a: SampleArgs, threads: usize) -> Outcome {
    let power = PowerParam::new(a.power)?;
    let phi = match (a.phi, a.p0) {
        (Some(phi), _) => phi,
        (None, Some(p0)) => dispersion_from_zero_mass(a.mu, power, p0)?,
        (None, None) => return Err(Failure::input("one of --phi or --p0 is required")),
    };
    if a.n == 0 {
        return Err(Failure::input("--n must be >= 1"));
    }
    if a.mu <= 0.0 {
        return Err(Failure::input(format!("--mu must be > 0, got {}", a.mu)));
    }
    let params = KernelParams::new(a.mu, phi, power)?;
    let m = RunManifest::new(
        "sample",
        json!({ "args": &a, "phi": phi }),
        Some(a.seed),
        threads,
    );
    let mut rng = seed::rng(a.seed);
    let values: Vec<f64> = (0..a.n).map(|_| tw::draw(&params, &mut rng)).collect();
    io::write_column(&a.out, "x", &values)?;
    finish(m, &a.out)
}

#[derive(Serialize)]
struct EstimateHeader {
    p0_hat: f64,
    h: f64,
    p: f64,
    n: usize,
    selected: bool,
}

fn estimate(a: EstimateArgs, threads: usize) -> Outcome {
    let m = RunManifest::new("estimate", json!({ "args": &a }), None, threads);
    let data = load(&a.data)?;
    let selected = a.h.is_none() || a.power.is_none();
    let (p, h) = match (a.power, a.h) {
        (Some(p), Some(h)) => (p, h),
        (power, h) => {
            let (pr, np) = match power {
                Some(p) => ((p, p), 1),
                None => (DEFAULT_P_RANGE, DEFAULT_P_COUNT),
            };
            let (hr, nh) = match h {
                Some(h) => ((h, h), 1),
                None => (default_h_range(&data)?, DEFAULT_H_COUNT),
            };
            let spec = GridSpec::ranges(pr, np, hr, nh)?;
            let sel = profile_select(&data, &spec, &EvaluationGrid::default_for(&data))?;
            (sel.p_star, sel.h_star)
        }
    };
    let grid = match a.grid_max {
        Some(upper) => EvaluationGrid::covering(upper, a.grid_size)?,
        None => EvaluationGrid::covering(EvaluationGrid::default_for(&data).upper(), a.grid_size)?,
    };
    let table = SeriesTable::new(PowerParam::new(p)?, SeriesPolicy::default());
    let fit = Estimator::new(&data, &table, h)?.on_grid(&grid)?;

    let mut text = String::from("x,g_hat\n");
    for (x, g) in grid.points().iter().zip(&fit.values) {
        let _ = writeln!(text, "{},{}", io::num(*x), io::num(*g));
    }
    io::write_text(&a.out, &text)?;
    let header = EstimateHeader {
        p0_hat: zero_mass_estimate(&data),
        h,
        p,
        n: data.len(),
        selected,
    };
    io::write_json(&io::sidecar(&a.out, ".header.json"), &header)?;
    finish(m, &a.out)
}

fn select(a: SelectArgs, threads: usize) -> Outcome {
    let m = RunManifest::new("select", json!({ "args": &a }), None, threads);
    let data = load(&a.data)?;
    let hr = match (a.hmin, a.hmax) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => default_h_range(&data)?,
    };
    let spec = GridSpec::ranges((a.pmin, a.pmax), a.np, hr, a.nh)?;
    let sel = profile_select(&data, &spec, &EvaluationGrid::default_for(&data))?;
    io::write_json(&a.out, &sel)?;
    finish(m, &a.out)
}

#[derive(Serialize)]
struct SimulationSummary {
    mean_ise: f64,
    sd_ise: f64,
    mean_iae: f64,
    sd_iae: f64,
    completed: usize,
    failures: Vec<scenarios::ReplicateFailure>,
}

fn simulate(a: SimulateArgs, threads: usize) -> Outcome {
    let m = RunManifest::new("simulate", json!({ "args": &a }), Some(a.seed), threads);
    let config = ScenarioConfig::new(a.scenario.into(), a.n, a.p0, a.seed, a.reps)?;
    let grids = if (a.np, a.nh) == (DEFAULT_P_COUNT, DEFAULT_H_COUNT) {
        GridChoice::Default
    } else {
        GridChoice::Sized {
            n_p: a.np,
            n_h: a.nh,
        }
    };
    let summary = scenarios::run_monte_carlo(&config, &grids, &EvalGridChoice::SampleDefault)?;

    let mut text = String::from("replicate,ise,iae,p_star,h_star,zero_fraction,failed_cells\n");
    for r in &summary.records {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.index,
            io::num(r.ise),
            io::num(r.iae),
            io::num(r.p_star),
            io::num(r.h_star),
            io::num(r.zero_fraction),
            r.failed_cells
        );
    }
    io::write_text(&a.out, &text)?;
    let brief = SimulationSummary {
        mean_ise: summary.mean_ise,
        sd_ise: summary.sd_ise,
        mean_iae: summary.mean_iae,
        sd_iae: summary.sd_iae,
        completed: summary.records.len(),
        failures: summary.failures,
    };
    io::write_json(&io::sidecar(&a.out, ".summary.json"), &brief)?;
    finish(m, &a.out)
}

fn goodness_of_fit(a: GofArgs, threads: usize) -> Outcome {
    let m = RunManifest::new("gof", json!({ "args": &a }), Some(a.seed), threads);
    let data = load(&a.data)?;
    let policy = match a.policy {
        PolicyArg::Reselect => TuningPolicy::Reselect,
        PolicyArg::Fixed => TuningPolicy::Fixed,
    };
    let config = GofConfig::new(NullModel::new(a.mu, a.phi, a.power)?, a.b, a.level, policy)?;
    let result = gof::run_test(&data, &config, &GridChoice::Default, None, a.seed)?;
    io::write_json(&a.out, &result)?;
    finish(m, &a.out)
}
