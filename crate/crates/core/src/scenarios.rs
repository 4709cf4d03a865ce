//! Data-generating processes, their true positive parts, error metrics and a
//! reproducible Monte Carlo harness.
//!
//! | id | positive part                              | zeros        |
//! |----|--------------------------------------------|--------------|
//! | M1 | Tweedie(μ = 2, φ(p₀), p = 1.1)             | `e^{-λ} = p₀` |
//! | M2 | Gamma(1.3, 6)                              | w.p. `p₀`    |
//! | M3 | 0.55 Gamma(2, 6) + 0.45 Gamma(15, 1)       | w.p. `p₀`    |
//! | M4 | 0.35 Gamma(4, 6) + 0.65 Gamma(20, 3)       | w.p. `p₀`    |
//!
//! Gamma parameters are (shape, rate).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};


use crate::asymptotics::{Curvature, DensityFn, TargetDensity};
use crate::error::{domain, Error, Result};
use crate::kde::{DensityEstimate, EvaluationGrid, Estimator, SemicontinuousSample, DEFAULT_GRID_SIZE};
use crate::quadrature::{integrate_half_line, Tolerance};
use crate::seed;
use crate::tuning::{profile_select, GridChoice};
use crate::tweedie::{
    dispersion_from_zero_mass, draw, positive_part_cdf, quantile_by_bisection, KernelParams, PowerParam, SeriesPolicy,
    SeriesTable,
};

/// Probability level of the right end of the metric grid.
pub const METRIC_QUANTILE: f64 = 0.9999;
/// Largest target mass allowed beyond the grid of an error metric.
pub const MAX_TAIL_MASS: f64 = 1e-3;

pub const M1_MEAN: f64 = 2.0;
pub const M1_POWER: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    M1,
    M2,
    M3,
    M4,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [ScenarioId::M1, ScenarioId::M2, ScenarioId::M3, ScenarioId::M4];
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioId::M1 => "M1",
            ScenarioId::M2 => "M2",
            ScenarioId::M3 => "M3",
            ScenarioId::M4 => "M4",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('.', "").as_str() {
            "M1" => Ok(ScenarioId::M1),
            "M2" => Ok(ScenarioId::M2),
            "M3" => Ok(ScenarioId::M3),
            "M4" => Ok(ScenarioId::M4),
            _ => domain(format!("unknown scenario {s:?}; expected M1, M2, M3 or M4")),
        }
    }
}

/// One Gamma component with weight, shape and rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaComponent {
    pub weight: f64,
    pub shape: f64,
    pub rate: f64,
}

impl GammaComponent {
    fn log_norm(&self) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape)
    }

    fn pdf(&self, x: f64) -> f64 {
        (self.log_norm() + (self.shape - 1.0) * x.ln() - self.rate * x).exp()
    }

    fn pdf_second(&self, x: f64) -> f64 {
        let a1 = self.shape - 1.0;
        let u = a1 / x - self.rate;
        self.pdf(x) * (u * u - a1 / (x * x))
    }

    fn cdf(&self, x: f64) -> f64 {
        gamma_lr(self.shape, self.rate * x)
    }

    fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

#[derive(Debug, Clone)]
enum Law {
    Tweedie {
        params: KernelParams,
        table: Arc<SeriesTable>,
    },
    Mixture(Vec<GammaComponent>),
}

/// A scenario at a given zero probability.
#[derive(Debug, Clone)]
pub struct Scenario {
    id: ScenarioId,
    p0: f64,
    law: Law,
}

impl Scenario {
    pub fn new(id: ScenarioId, p0: f64) -> Result<Self> {
        if !(p0 > 0.0 && p0 < 1.0) {
            return domain(format!("zero probability must lie in (0, 1), got {p0}"));
        }
        let mix = |c: &[(f64, f64, f64)]| {
            Law::Mixture(
                c.iter()
                    .map(|&(weight, shape, rate)| GammaComponent {
                        weight,
                        shape,
                        rate,
                    })
                    .collect(),
            )
        };
        let law = match id {
            ScenarioId::M1 => {
                let power = PowerParam::new(M1_POWER)?;
                let phi = dispersion_from_zero_mass(M1_MEAN, power, p0)?;
                Law::Tweedie {
                    params: KernelParams::new(M1_MEAN, phi, power)?,
                    table: Arc::new(SeriesTable::new(power, SeriesPolicy::default())),
                }
            }
            ScenarioId::M2 => mix(&[(1.0, 1.3, 6.0)]),
            ScenarioId::M3 => mix(&[(0.55, 2.0, 6.0), (0.45, 15.0, 1.0)]),
            ScenarioId::M4 => mix(&[(0.35, 4.0, 6.0), (0.65, 20.0, 3.0)]),
        };
        Ok(Self { id, p0, law })
    }

    pub fn id(&self) -> ScenarioId {
        self.id
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    /// `(μ, φ, p)` of the M1 law.
    pub fn tweedie_params(&self) -> Option<KernelParams> {
        match &self.law {
            Law::Tweedie { params, .. } => Some(*params),
            Law::Mixture(_) => None,
        }
    }

    /// `g₊(x)`, carrying mass `1 - p₀`.
    pub fn positive_density(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return 0.0;
        }
        match &self.law {
            Law::Tweedie { params, table } => table
                .subdensity(x, params.x(), params.h())
                .unwrap_or(f64::NAN),
            Law::Mixture(c) => {
                (1.0 - self.p0) * c.iter().map(|c| c.weight * c.pdf(x)).sum::<f64>()
            }
        }
    }

    /// Exact `g₊''(x)` for the Gamma mixtures.
    pub fn positive_second_derivative(&self, x: f64) -> Option<f64> {
        match &self.law {
            Law::Tweedie { .. } => None,
            Law::Mixture(c) => {
                Some((1.0 - self.p0) * c.iter().map(|c| c.weight * c.pdf_second(x)).sum::<f64>())
            }
        }
    }

    /// `P(X ≤ x | X > 0)`.
    pub fn positive_cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match &self.law {
            Law::Tweedie { params, .. } => positive_part_cdf(params, x),
            Law::Mixture(c) => c.iter().map(|c| c.weight * c.cdf(x)).sum(),
        }
    }

    /// Quantile of the positive part.
    pub fn positive_quantile(&self, prob: f64) -> Result<f64> {
        quantile_by_bisection(|x| self.positive_cdf(x), prob, self.positive_mean())
    }

    /// `E(X | X > 0)`.
    pub fn positive_mean(&self) -> f64 {
        match &self.law {
            Law::Tweedie { params, .. } => params.x() / (1.0 - self.p0),
            Law::Mixture(c) => c.iter().map(|c| c.weight * c.mean()).sum(),
        }
    }

    /// 512 points on `(0, q]` with `q` the 0.9999 quantile of the positive
    /// part.
    pub fn metric_grid(&self) -> Result<EvaluationGrid> {
        EvaluationGrid::covering(self.positive_quantile(METRIC_QUANTILE)?, DEFAULT_GRID_SIZE)
    }

    /// The positive part as an asymptotics target.
    pub fn target(&self) -> Result<TargetDensity> {
        let me = self.clone();
        let g: DensityFn = Arc::new(move |x| me.positive_density(x));
        let curvature = match &self.law {
            Law::Tweedie { .. } => Curvature::FiniteDifference,
            Law::Mixture(_) => {
                let me = self.clone();
                Curvature::Analytic(Arc::new(move |x| {
                    me.positive_second_derivative(x).expect("mixture curvature")
                }))
            }
        };
        let breaks = match &self.law {
            Law::Tweedie { params, .. } => vec![0.5 * params.x(), params.x(), 2.0 * params.x()],
            Law::Mixture(c) => c
                .iter()
                .flat_map(|c| [((c.shape - 1.0) / c.rate).max(0.05 / c.rate), c.mean()])
                .collect(),
        };
        TargetDensity::new(g, curvature, self.p0, breaks)
    }

    /// One draw from the scenario law.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.law {
            Law::Tweedie { params, .. } => draw(params, rng),
            Law::Mixture(c) => {
                if rng.random::<f64>() < self.p0 {
                    return 0.0;
                }
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = c[c.len() - 1];
                for comp in c {
                    acc += comp.weight;
                    if u < acc {
                        pick = *comp;
                        break;
                    }
                }
                Gamma::new(pick.shape, 1.0 / pick.rate)
                    .expect("valid Gamma component")
                    .sample(rng)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SemicontinuousSample> {
        if n == 0 {
            return domain("sample size must be >= 1");
        }
        SemicontinuousSample::new((0..n).map(|_| self.draw(rng)).collect())
    }
}

/// A Monte Carlo design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    pub n: usize,
    pub p0: f64,
    pub seed: u64,
    pub reps: usize,
}

impl ScenarioConfig {
    pub fn new(id: ScenarioId, n: usize, p0: f64, seed: u64, reps: usize) -> Result<Self> {
        let c = Self {
            id,
            n,
            p0,
            seed,
            reps,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.reps == 0 {
            return domain("sample size and replicate count must be >= 1");
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return domain(format!("zero probability must lie in (0, 1), got {}", self.p0));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::new(self.id, self.p0)
    }
}

/// Replicate `r` of a configuration, drawn from stream `(seed, r)`.
pub fn generate_replicate(config: &ScenarioConfig, r: usize) -> Result<SemicontinuousSample> {
    config.validate()?;
    let mut rng = seed::stream(config.seed, r as u64);
    config.scenario()?.sample(config.n, &mut rng)
}

/// The first replicate of `config`.
pub fn generate(config: &ScenarioConfig) -> Result<SemicontinuousSample> {
    generate_replicate(config, 0)
}

/// A target evaluated on a metric grid, with the mass it leaves beyond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOnGrid {
    pub grid: EvaluationGrid,
    pub values: Vec<f64>,
    pub tail_mass: f64,
}

impl TargetOnGrid {
    pub fn for_scenario(scenario: &Scenario, grid: &EvaluationGrid) -> Self {
        let upper = grid.upper();
        Self {
            grid: grid.clone(),
            values: grid.points().iter().map(|&x| scenario.positive_density(x)).collect(),
            tail_mass: (1.0 - scenario.p0()) * (1.0 - scenario.positive_cdf(upper)),
        }
    }

    /// Generic targets; the tail mass comes from quadrature.
    pub fn for_target(target: &TargetDensity, grid: &EvaluationGrid) -> Result<Self> {
        let upper = grid.upper();
        let breaks: Vec<f64> = target
            .breaks()
            .iter()
            .filter(|&&b| b > upper)
            .map(|&b| b - upper)
            .chain(std::iter::once(upper.max(1e-3)))
            .collect();
        let tail = integrate_half_line(|u| target.g(upper + u), &breaks, Tolerance::new(1e-12, 1e-8))?;
        Ok(Self {
            grid: grid.clone(),
            values: grid.points().iter().map(|&x| target.g(x)).collect(),
            tail_mass: tail.value,
        })
    }

    fn check(&self, grid: &EvaluationGrid, values: &[f64]) -> Result<()> {
        if grid.points() != self.grid.points() || values.len() != self.values.len() {
            return Err(Error::GridMismatch(
                "estimate and target live on different grids".into(),
            ));
        }
        if self.tail_mass > MAX_TAIL_MASS {
            return Err(Error::GridTooNarrow {
                tail_mass: self.tail_mass,
            });
        }
        Ok(())
    }
}

/// `Σ (ĝ₊ - g₊)² Δx` over the shared grid.
pub fn ise_plus(estimate: &DensityEstimate, target: &TargetOnGrid) -> Result<f64> {
    target.check(&estimate.grid, &estimate.values)?;
    Ok(estimate
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        * estimate.grid.spacing())
}

/// `Σ |ĝ₊ - g₊| Δx` over the shared grid.
pub fn iae_plus(estimate: &DensityEstimate, target: &TargetOnGrid) -> Result<f64> {
    target.check(&estimate.grid, &estimate.values)?;
    Ok(estimate
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * estimate.grid.spacing())
}

/// Grid on which the LSCV integral of each replicate is discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvalGridChoice {
    /// [`EvaluationGrid::default_for`] the replicate.
    SampleDefault,
    Fixed(EvaluationGrid),
}

impl EvalGridChoice {
    pub fn resolve(&self, sample: &SemicontinuousSample) -> EvaluationGrid {
        match self {
            EvalGridChoice::SampleDefault => EvaluationGrid::default_for(sample),
            EvalGridChoice::Fixed(g) => g.clone(),
        }
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub ise: f64,
    pub iae: f64,
    pub p_star: f64,
    pub h_star: f64,
    pub zero_fraction: f64,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub error: String,
}

/// Per-replicate errors and their moments, in replicate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub config: ScenarioConfig,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<ReplicateFailure>,
    pub mean_ise: f64,
    pub sd_ise: f64,
    pub mean_iae: f64,
    pub sd_iae: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl ReplicationSummary {
    pub fn from_records(
        config: ScenarioConfig,
        records: Vec<ReplicateRecord>,
        failures: Vec<ReplicateFailure>,
    ) -> Self {
        let ise: Vec<f64> = records.iter().map(|r| r.ise).collect();
        let iae: Vec<f64> = records.iter().map(|r| r.iae).collect();
        let (mean_ise, sd_ise) = mean_sd(&ise);
        let (mean_iae, sd_iae) = mean_sd(&iae);
        Self {
            config,
            records,
            failures,
            mean_ise,
            sd_ise,
            mean_iae,
            sd_iae,
        }
    }
}

/// Select, fit and score one replicate.
pub fn run_replicate(
    config: &ScenarioConfig,
    r: usize,
    grids: &GridChoice,
    eval: &EvalGridChoice,
    target: &TargetOnGrid,
) -> Result<ReplicateRecord> {
    let sample = generate_replicate(config, r)?;
    let spec = grids.resolve(&sample)?;
    let selection = profile_select(&sample, &spec, &eval.resolve(&sample))?;
    let table = SeriesTable::shared(PowerParam::new(selection.p_star)?, SeriesPolicy::default());
    let fit = Estimator::new(&sample, &table, selection.h_star)?.on_grid(&target.grid)?;
    Ok(ReplicateRecord {
        index: r,
        ise: ise_plus(&fit, target)?,
        iae: iae_plus(&fit, target)?,
        p_star: selection.p_star,
        h_star: selection.h_star,
        zero_fraction: fit.zero_mass,
        failed_cells: selection.failed.len(),
    })
}

/// Runs every replicate of `config`. Replicates run in parallel; records
/// and moments are assembled in replicate order, so the summary does not
/// depend on the thread count.
pub fn run_monte_carlo(
    config: &ScenarioConfig,
    grids: &GridChoice,
    eval: &EvalGridChoice,
) -> Result<ReplicationSummary> {
    config.validate()?;
    let scenario = config.scenario()?;
    let target = TargetOnGrid::for_scenario(&scenario, &scenario.metric_grid()?);
    let outcomes: Vec<Result<ReplicateRecord>> = (0..config.reps)
        .into_par_iter()
        .map(|r| run_replicate(config, r, grids, eval, &target))
        .collect();
    let mut records = Vec::with_capacity(config.reps);
    let mut failures = Vec::new();
    for (index, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(ReplicateFailure {
                index,
                error: e.to_string(),
            }),
        }
    }
    Ok(ReplicationSummary::from_records(config.clone(), records, failures))
}
