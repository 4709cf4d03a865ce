//! Goodness of fit of a fully specified Tweedie law.
//!
//! The statistic is the squared L² distance on `(0, ∞)` between the kernel
//! estimate and the null subdensity,
//!
//! ```text
//! T_n = Σ_ℓ {ĝ(x_ℓ) - f(x_ℓ; θ₀)}² Δx,
//! ```
//!
//! calibrated by recomputing it on `B` samples drawn from the null. The atom
//! at zero does not enter the statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kde::{
    integrated_squared_distance, DensityEstimate, EvaluationGrid, Estimator, SemicontinuousSample,
    DEFAULT_GRID_SIZE,
};
use crate::scenarios::METRIC_QUANTILE;
use crate::seed;
use crate::tuning::{profile_select, GridChoice};
use crate::tweedie::{
    draw, positive_part_cdf, quantile_by_bisection, KernelParams, PowerParam, SeriesPolicy,
    SeriesTable,
};

pub const DEFAULT_B: usize = 500;
pub const DEFAULT_LEVEL: f64 = 0.05;

/// The null law `Tw_p(μ, φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub mu: f64,
    pub phi: f64,
    pub p: f64,
}

impl NullModel {
    pub fn new(mu: f64, phi: f64, p: f64) -> Result<Self> {
        let m = Self { mu, phi, p };
        m.params()?;
        if mu <= 0.0 {
            return domain(format!("null mean must be > 0, got {mu}"));
        }
        Ok(m)
    }

    pub fn params(&self) -> Result<KernelParams> {
        KernelParams::new(self.mu, self.phi, PowerParam::new(self.p)?)
    }

    /// Null subdensity at each grid point.
    pub fn density_on_grid(&self, grid: &EvaluationGrid) -> Result<Vec<f64>> {
        let table = SeriesTable::new(PowerParam::new(self.p)?, SeriesPolicy::default());
        grid.points()
            .iter()
            .map(|&x| table.subdensity(x, self.mu, self.phi))
            .collect()
    }

    /// Quantile of the positive part of the null.
    pub fn positive_quantile(&self, prob: f64) -> Result<f64> {
        let k = self.params()?;
        quantile_by_bisection(|x| positive_part_cdf(&k, x), prob, self.mu)
    }

    pub fn sample(&self, n: usize, seed_value: u64, index: u64) -> Result<SemicontinuousSample> {
        if n == 0 {
            return domain("sample size must be >= 1");
        }
        let k = self.params()?;
        let mut rng = seed::stream(seed_value, index);
        SemicontinuousSample::new((0..n).map(|_| draw(&k, &mut rng)).collect())
    }
}

/// How calibration samples are smoothed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningPolicy {
    /// Rerun the profile search on each calibration sample.
    Reselect,
    /// Reuse the `(p*, h*)` selected on the observed sample.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofConfig {
    pub null: NullModel,
    pub b: usize,
    pub level: f64,
    pub policy: TuningPolicy,
}

impl GofConfig {
    pub fn new(null: NullModel, b: usize, level: f64, policy: TuningPolicy) -> Result<Self> {
        if b == 0 {
            return domain("calibration size B must be >= 1");
        }
        if !(level > 0.0 && level < 1.0) {
            return domain(format!("level must lie in (0, 1), got {level}"));
        }
        Ok(Self {
            null,
            b,
            level,
            policy,
        })
    }

    pub fn with_defaults(null: NullModel) -> Self {
        Self {
            null,
            b: DEFAULT_B,
            level: DEFAULT_LEVEL,
            policy: TuningPolicy::Reselect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    /// Share of calibration statistics at least as large as the observed one.
    pub p_value: f64,
    pub p_star: f64,
    pub h_star: f64,
    pub calibration: Vec<f64>,
}

/// `T_n` for an estimate and the null on the same grid.
pub fn statistic(estimate: &DensityEstimate, null_on_grid: &[f64]) -> Result<f64> {
    integrated_squared_distance(&estimate.grid, &estimate.values, null_on_grid)
}

/// Order statistic `⌈(1 - level) B⌉` of the calibration values.
pub fn critical_value(calibration: &[f64], level: f64) -> Result<f64> {
    if calibration.is_empty() {
        return domain("no calibration statistics");
    }
    let mut sorted = calibration.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    // guard against (1 - level)·B landing a rounding error above an integer
    let k = ((1.0 - level) * b as f64 - 1e-9).ceil() as usize;
    Ok(sorted[k.clamp(1, b) - 1])
}

/// Grid shared by the observed and calibration statistics: 512 points on
/// `(0, max(1.1·max X, q))`, `q` the 0.9999 quantile of the null's
/// positive part.
pub fn statistic_grid(sample: &SemicontinuousSample, null: &NullModel) -> Result<EvaluationGrid> {
    let upper = (1.1 * sample.max()).max(null.positive_quantile(METRIC_QUANTILE)?);
    EvaluationGrid::covering(upper, DEFAULT_GRID_SIZE)
}

struct Smoothed {
    p: f64,
    h: f64,
    value: f64,
}

fn smooth_and_measure(
    sample: &SemicontinuousSample,
    choice: Option<(f64, f64)>,
    grids: &GridChoice,
    grid: &EvaluationGrid,
    null_on_grid: &[f64],
) -> Result<Smoothed> {
    let (p, h) = match choice {
        Some(ph) => ph,
        None => {
            let spec = grids.resolve(sample)?;
            let sel = profile_select(sample, &spec, &EvaluationGrid::default_for(sample))?;
            (sel.p_star, sel.h_star)
        }
    };
    let table = SeriesTable::shared(PowerParam::new(p)?, SeriesPolicy::default());
    let fit = Estimator::new(sample, &table, h)?.on_grid(grid)?;
    Ok(Smoothed {
        p,
        h,
        value: statistic(&fit, null_on_grid)?,
    })
}

/// Monte Carlo calibrated test of `config.null`.
///
/// Calibration sample `b` is drawn from stream `(seed, b)`, so the result is
/// deterministic in `(sample, config, grids, grid, seed)` and independent of
/// the thread count. `grid = None` uses [`statistic_grid`].
pub fn run_test(
    sample: &SemicontinuousSample,
    config: &GofConfig,
    grids: &GridChoice,
    grid: Option<&EvaluationGrid>,
    seed_value: u64,
) -> Result<GofResult> {
    if config.b == 0 {
        return domain("calibration size B must be >= 1");
    }
    let grid = match grid {
        Some(g) => g.clone(),
        None => statistic_grid(sample, &config.null)?,
    };
    let null_on_grid = config.null.density_on_grid(&grid)?;
    let observed = smooth_and_measure(sample, None, grids, &grid, &null_on_grid)?;
    let choice = match config.policy {
        TuningPolicy::Reselect => None,
        TuningPolicy::Fixed => Some((observed.p, observed.h)),
    };
    let n = sample.len();
    let calibration = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let sim = config.null.sample(n, seed_value, b as u64)?;
            Ok(smooth_and_measure(&sim, choice, grids, &grid, &null_on_grid)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let critical = critical_value(&calibration, config.level)?;
    let exceed = calibration.iter().filter(|&&t| t >= observed.value).count();
    Ok(GofResult {
        statistic: observed.value,
        critical_value: critical,
        reject: observed.value > critical,
        p_value: exceed as f64 / config.b as f64,
        p_star: observed.p,
        h_star: observed.h,
        calibration,
    })
}
