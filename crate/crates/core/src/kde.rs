//! Tweedie kernel estimator of a mixed density on `[0, ∞)`.
//!
//! ```text
//! ĝ_h(x) = (1/n) Σ_i K_h(X_i; x)
//! ```
//!
//! At `x = 0` the kernel is the point mass at zero, so `ĝ_h(0)` is exactly the
//! empirical proportion of zeros. For `x > 0` zero observations contribute
//! the kernel atom `e^{-λ_x}` and positive observations its subdensity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::tweedie::{
    kernel_eval, point_mass, KernelParams, PowerParam, SeriesPolicy, SeriesTable,
};

/// Default number of points in an evaluation grid.
pub const DEFAULT_GRID_SIZE: usize = 512;

/// Nonnegative observations, stored sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SemicontinuousSample {
    values: Vec<f64>,
    zeros: usize,
    log_positive: Vec<f64>,
}

impl SemicontinuousSample {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateSample("sample is empty".into()));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return domain(format!("observation {i} is not a finite nonnegative value: {v}"));
        }
        values.sort_by(f64::total_cmp);
        let zeros = values.iter().take_while(|&&v| v == 0.0).count();
        let log_positive = values[zeros..].iter().map(|v| v.ln()).collect();
        Ok(Self {
            values,
            zeros,
            log_positive,
        })
    }

    /// Like [`SemicontinuousSample::new`], but values with `|x| < snap` are
    /// first set to exactly zero.
    pub fn with_zero_snap(values: Vec<f64>, snap: f64) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| if v.abs() < snap { 0.0 } else { v })
            .collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.zeros
    }

    pub fn positives(&self) -> &[f64] {
        &self.values[self.zeros..]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("sample is nonempty")
    }

    pub(crate) fn log_positives(&self) -> &[f64] {
        &self.log_positive
    }
}

/// Equally spaced grid `x₁ < … < x_m` in `(0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    points: Vec<f64>,
    spacing: f64,
}

impl EvaluationGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return domain("evaluation grid needs at least two points");
        }
        if !(points[0] > 0.0 && points.iter().all(|x| x.is_finite())) {
            return domain("evaluation grid must lie in (0, ∞)");
        }
        let spacing = points[1] - points[0];
        if !(spacing > 0.0) {
            return domain("evaluation grid must be strictly increasing");
        }
        for w in points.windows(2) {
            let d = w[1] - w[0];
            if (d - spacing).abs() > 1e-12 * spacing.max(w[1].abs()) {
                return domain(format!(
                    "evaluation grid is not equally spaced (step {d} vs {spacing})"
                ));
            }
        }
        Ok(Self { points, spacing })
    }

    /// `m` points `Δx, 2Δx, …, upper` with `Δx = upper / m`.
    pub fn covering(upper: f64, m: usize) -> Result<Self> {
        if !(upper.is_finite() && upper > 0.0) {
            return domain(format!("grid upper end must be > 0, got {upper}"));
        }
        if m < 2 {
            return domain("evaluation grid needs at least two points");
        }
        let spacing = upper / m as f64;
        let points = (1..=m).map(|k| k as f64 * spacing).collect();
        Ok(Self { points, spacing })
    }

    /// 512 points on `(0, 1.1·max X]`; an all-zero sample gets `(0, 1]`.
    pub fn default_for(sample: &SemicontinuousSample) -> Self {
        let upper = if sample.max() > 0.0 {
            1.1 * sample.max()
        } else {
            1.0
        };
        Self::covering(upper, DEFAULT_GRID_SIZE).expect("upper end is positive")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn upper(&self) -> f64 {
        *self.points.last().expect("grid is nonempty")
    }
}

/// Atom estimate plus the positive-part estimate on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub zero_mass: f64,
    pub grid: EvaluationGrid,
    pub values: Vec<f64>,
    pub h: f64,
    pub p: PowerParam,
}

impl DensityEstimate {
    /// Left Riemann sum of the positive part, `Σ ĝ(x_ℓ) Δx`.
    pub fn positive_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.spacing()
    }
}

/// Empirical proportion of exact zeros.
pub fn zero_mass_estimate(sample: &SemicontinuousSample) -> f64 {
    sample.zero_count() as f64 / sample.len() as f64
}

/// Estimator bound to a sample, a bandwidth and a cached series table.
///
/// The Tweedie law is an exponential dispersion model, so its subdensity
/// factors as `k_h(t; x) = k_h(t; t) · exp(-d_p(t, x) / 2h)`. The series is
/// summed once per observation for `k_h(X_i; X_i)`; every other pair costs
/// one deviance and one exponential.
#[derive(Debug, Clone)]
pub struct Estimator<'a> {
    sample: &'a SemicontinuousSample,
    table: &'a SeriesTable,
    h: f64,
    inv_h: f64,
    /// Positive observations, ascending, with `k_h(t; t)` and
    /// `t^{2-p}/((1-p)(2-p))` in parallel arrays.
    t: Vec<f64>,
    scale: Vec<f64>,
    offset: Vec<f64>,
}

/// `x`-dependent parts of the deviance, `x^{1-p}/(1-p)` and `x^{2-p}/(2-p)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DevianceCenter {
    x: f64,
    slope: f64,
    offset: f64,
}

impl DevianceCenter {
    #[inline]
    pub(crate) fn new(x: f64, p: f64) -> Self {
        Self {
            x,
            slope: x.powf(1.0 - p) / (1.0 - p),
            offset: x.powf(2.0 - p) / (2.0 - p),
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Pairs with `d_p(t, x)/2h` above this are dropped; they fall below
/// `4.3e-18` of the pair's peak `k_h(t; t)`.
pub const NEGLIGIBLE_HALF_DEVIANCE: f64 = 40.0;

/// `d_p(t, x)/2h`, clamped against cancellation at `t = x`.
#[inline]
fn half_deviance(t: f64, offset: f64, dc: &DevianceCenter, inv_h: f64) -> f64 {
    ((offset - t * dc.slope + dc.offset) * inv_h).max(0.0)
}

/// First index in `lo..hi` where `pred` fails; `pred` must hold on a prefix.
#[inline]
fn partition(mut lo: usize, mut hi: usize, pred: impl Fn(usize) -> bool) -> usize {
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// `e^{-e}` for `0 ≤ e ≤ NEGLIGIBLE_HALF_DEVIANCE`, within 3e-16 relative.
///
/// Branch-free so that batches vectorize: `e = k ln 2 - r` with `|r| ≤ ln2/2`
/// (`k` read from the low mantissa bits of a shifted sum), then a degree-13
/// Taylor polynomial for `e^r` scaled by `2^{-k}`.
#[inline(always)]
fn exp_neg(e: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 0.693_145_751_953_125;
    const LN2_LO: f64 = 1.428_606_820_309_417_232_12e-6;
    const C: [f64; 12] = [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
    ];
    let x = -e;
    let shifted = x * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut poly = C[0];
    for &c in &C[1..] {
        poly = poly * r + c;
    }
    poly = poly * r + 1.0;
    poly = poly * r + 1.0;
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    poly * scale
}

#[inline]
fn deviance_offset(t: f64, p: f64) -> f64 {
    t.powf(2.0 - p) / ((1.0 - p) * (2.0 - p))
}

impl<'a> Estimator<'a> {
    pub fn new(sample: &'a SemicontinuousSample, table: &'a SeriesTable, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return domain(format!("bandwidth must be > 0, got {h}"));
        }
        let p = table.power().value();
        let pos = sample.positives();
        let mut scale = Vec::with_capacity(pos.len());
        for (&t, &log_t) in pos.iter().zip(sample.log_positives()) {
            scale.push(table.subdensity_at(t, log_t, &table.center(t, h))?);
        }
        Ok(Self {
            sample,
            table,
            h,
            inv_h: 1.0 / h,
            t: pos.to_vec(),
            scale,
            offset: pos.iter().map(|&t| deviance_offset(t, p)).collect(),
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn power(&self) -> PowerParam {
        self.table.power()
    }


    /// `ĝ_h(x)` for `x > 0`.
    pub fn at(&self, x: f64) -> Result<f64> {
        if !(x.is_finite() && x > 0.0) {
            return domain(format!("estimator is evaluated at x > 0, got {x}"));
        }
        Ok(self.at_center(&DevianceCenter::new(x, self.power().value())))
    }

    /// `ĝ_h` at a prepared center.
    ///
    /// The half deviance grows monotonically as `t` moves away from `x`, so
    /// only a contiguous window of the sorted observations around `x` is
    /// non-negligible; its ends are found by bisection. Left neighbours are summed first, then right ones,
    /// both moving away from `x`.
    pub(crate) fn at_center(&self, dc: &DevianceCenter) -> f64 {
        let mut sum = self.sample.zero_count() as f64 * (-dc.offset * self.inv_h).exp();
        let inv_h = self.inv_h;
        let hd = |k: usize| half_deviance(self.t[k], self.offset[k], dc, inv_h);
        let split = self.t.partition_point(|&t| t < dc.x);
        let lo = partition(0, split, |k| hd(k) > NEGLIGIBLE_HALF_DEVIANCE);
        let hi = partition(split, self.t.len(), |k| hd(k) <= NEGLIGIBLE_HALF_DEVIANCE);
        SCRATCH.with(|cell| {
            let mut w = cell.borrow_mut();
            w.clear();
            let (t, offset, scale) = (&self.t[lo..hi], &self.offset[lo..hi], &self.scale[lo..hi]);
            w.extend(t.iter().zip(offset).map(|(&t, &o)| half_deviance(t, o, dc, inv_h)));
            for (v, &s) in w.iter_mut().zip(scale) {
                *v = s * exp_neg(*v);
            }
            let (left, right) = w.split_at(split - lo);
            for &v in left.iter().rev() {
                sum += v;
            }
            for &v in right {
                sum += v;
            }
        });
        sum / self.sample.len() as f64
    }

    /// `K_h(t; x)`: the atom when `t = 0`, the subdensity otherwise.
    pub fn kernel(&self, t: f64, x: f64) -> Result<f64> {
        if !(x.is_finite() && x > 0.0) {
            return domain(format!("kernel center must be > 0, got {x}"));
        }
        let p = self.power().value();
        let dc = DevianceCenter::new(x, p);
        if t == 0.0 {
            return Ok((-dc.offset * self.inv_h).exp());
        }
        if !(t.is_finite() && t > 0.0) {
            return domain(format!("kernel argument must be >= 0, got {t}"));
        }
        // observed values reuse their cached factor so that kernel() and at()
        // agree bitwise
        let (scale, offset) = match self.t.binary_search_by(|o| o.total_cmp(&t)) {
            Ok(k) => (self.scale[k], self.offset[k]),
            Err(_) => (
                self.table.subdensity_at(t, t.ln(), &self.table.center(t, self.h))?,
                deviance_offset(t, p),
            ),
        };
        let e = half_deviance(t, offset, &dc, self.inv_h);
        Ok(if e <= NEGLIGIBLE_HALF_DEVIANCE {
            scale * exp_neg(e)
        } else {
            0.0
        })
    }

    /// `ĝ_h` at every grid point; grid points are independent, so the
    /// result does not depend on the parallel schedule.
    pub fn on_grid(&self, grid: &EvaluationGrid) -> Result<DensityEstimate> {
        let values = grid
            .points()
            .par_iter()
            .map(|&x| self.at(x))
            .collect::<Result<Vec<f64>>>()?;
        Ok(DensityEstimate {
            zero_mass: zero_mass_estimate(self.sample),
            grid: grid.clone(),
            values,
            h: self.h,
            p: self.power(),
        })
    }

    /// Leave-one-out value through `n/(n-1) ĝ(x) - K(X_i; x)/(n-1)`.
    pub fn leave_one_out(&self, i: usize, x: f64, full: f64) -> Result<f64> {
        let n = self.sample.len();
        if n < 2 {
            return Err(Error::DegenerateSample(
                "leave-one-out needs at least two observations".into(),
            ));
        }
        let xi = *self
            .sample
            .values()
            .get(i)
            .ok_or_else(|| Error::Domain(format!("observation index {i} out of range")))?;
        let nf = n as f64;
        let v = nf / (nf - 1.0) * full - self.kernel(xi, x)? / (nf - 1.0);
        Ok(v.max(0.0))
    }
}

/// `ĝ_h(x)` at a single `x > 0`, summing the series kernel of every
/// observation. This is the reference route; [`Estimator`] is the fast one.
pub fn evaluate(sample: &SemicontinuousSample, x: f64, h: f64, p: f64) -> Result<f64> {
    let power = PowerParam::new(p)?;
    let policy = SeriesPolicy::default();
    let params = KernelParams::new(x, h, power)?;
    if x <= 0.0 {
        return domain(format!("estimator is evaluated at x > 0, got {x}"));
    }
    let mut sum = sample.zero_count() as f64 * point_mass(&params);
    for &t in sample.positives() {
        sum += kernel_eval(t, &params, &policy)?.value();
    }
    Ok(sum / sample.len() as f64)
}

/// [`evaluate`] at every point of `grid`.
pub fn evaluate_grid(
    sample: &SemicontinuousSample,
    grid: &EvaluationGrid,
    h: f64,
    p: f64,
) -> Result<DensityEstimate> {
    let power = PowerParam::new(p)?;
    let values = grid
        .points()
        .par_iter()
        .map(|&x| evaluate(sample, x, h, p))
        .collect::<Result<Vec<f64>>>()?;
    Ok(DensityEstimate {
        zero_mass: zero_mass_estimate(sample),
        grid: grid.clone(),
        values,
        h,
        p: power,
    })
}

/// Leave-one-out estimate without observation `i` (sorted index) at `x`,
/// given the full-sample value `full = ĝ_h(x)`, on the reference route.
pub fn loo_evaluate(
    sample: &SemicontinuousSample,
    i: usize,
    x: f64,
    h: f64,
    p: f64,
    full: f64,
) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::DegenerateSample(
            "leave-one-out needs at least two observations".into(),
        ));
    }
    let xi = *sample
        .values()
        .get(i)
        .ok_or_else(|| Error::Domain(format!("observation index {i} out of range")))?;
    let params = KernelParams::new(x, h, PowerParam::new(p)?)?;
    let k = kernel_eval(xi, &params, &SeriesPolicy::default())?.value();
    let nf = n as f64;
    Ok((nf / (nf - 1.0) * full - k / (nf - 1.0)).max(0.0))
}

/// `∫ (a - b)² dx` over a shared grid by the left Riemann rule.
pub fn integrated_squared_distance(grid: &EvaluationGrid, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != grid.len() || b.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "curves of length {} and {} on a grid of {} points",
            a.len(),
            b.len(),
            grid.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() * grid.spacing())
}
