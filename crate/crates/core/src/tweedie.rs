//! Tweedie compound Poisson–Gamma law used as the smoothing kernel.
//!
//! For a center `x > 0`, dispersion `h > 0` and power `p ∈ (1, 2)` the kernel
//! `K_h(·; x)` is the law of `Σ_{k=1}^N G_k` with `N ~ Poisson(λ)` and
//! `G_k ~ Gamma(α, β)`, where
//!
//! ```text
//! λ = x^{2-p} / (h (2-p)),   α = (2-p)/(p-1),   β = h (p-1) x^{p-1}.
//! ```
//!
//! It has an atom `e^{-λ}` at zero and a subdensity on `(0, ∞)` given by an
//! infinite Poisson-weighted sum of Gamma densities. The sum is evaluated in
//! log space starting from its largest term and expanding in both directions.
//!
//! Two evaluation routes are provided:
//!
//! * [`log_subdensity`] evaluates a single point from scratch (log-gamma per
//!   term). It is the reference route.
//! * [`SeriesTable`] caches the log-gamma coefficients for one power and
//!   walks the terms with ratio recurrences. The estimator uses it for bulk
//!   evaluation.

use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{domain, Error, Result};
use crate::kde::SemicontinuousSample;
use crate::seed;

/// Log-values below this are treated as exact zeros when only the value is
/// needed. The Stirling bound used for the check is loose by at most a few
/// tens of nats, and `exp` underflows below -745.
const NEGLIGIBLE_LOG: f64 = -800.0;

/// Power index of the Tweedie variance function, strictly inside (1, 2).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PowerParam(f64);

impl PowerParam {
    pub fn new(p: f64) -> Result<Self> {
        if p.is_finite() && p > 1.0 && p < 2.0 {
            Ok(Self(p))
        } else {
            domain(format!("power parameter must lie in (1, 2), got {p}"))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Gamma shape of each compound jump, `(2-p)/(p-1)`.
    #[inline]
    pub fn alpha(self) -> f64 {
        (2.0 - self.0) / (self.0 - 1.0)
    }
}

impl TryFrom<f64> for PowerParam {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        Self::new(p)
    }
}

impl From<PowerParam> for f64 {
    fn from(p: PowerParam) -> f64 {
        p.0
    }
}

/// Kernel center `x`, dispersion (bandwidth) `h` and power `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    x: f64,
    h: f64,
    p: PowerParam,
}

impl KernelParams {
    pub fn new(x: f64, h: f64, p: PowerParam) -> Result<Self> {
        if !(x.is_finite() && x >= 0.0) {
            return domain(format!("kernel center must be finite and >= 0, got {x}"));
        }
        if !(h.is_finite() && h > 0.0) {
            return domain(format!("dispersion must be finite and > 0, got {h}"));
        }
        Ok(Self { x, h, p })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn power(&self) -> PowerParam {
        self.p
    }

    pub fn derived(&self) -> Derived {
        derived_params(self)
    }
}

/// Poisson rate, Gamma shape and Gamma scale of the compound representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derived {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Truncation policy for the kernel series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPolicy {
    cutoff: f64,
    max_index: usize,
}

impl Default for SeriesPolicy {
    fn default() -> Self {
        Self {
            cutoff: 1e-15,
            max_index: 1_000_000,
        }
    }
}

impl SeriesPolicy {
    pub fn new(cutoff: f64, max_index: usize) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff < 1.0) {
            return domain(format!("series cutoff must lie in (0, 1), got {cutoff}"));
        }
        if max_index < 1 {
            return domain("series max index must be >= 1");
        }
        Ok(Self { cutoff, max_index })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn max_index(&self) -> usize {
        self.max_index
    }

    #[inline]
    fn log_cutoff(&self) -> f64 {
        self.cutoff.ln()
    }
}

/// A kernel evaluation: either the atom at zero or the subdensity on (0, ∞).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelValue {
    Atom(f64),
    Subdensity(f64),
}

impl KernelValue {
    pub fn value(self) -> f64 {
        match self {
            KernelValue::Atom(v) | KernelValue::Subdensity(v) => v,
        }
    }

    pub fn is_atom(self) -> bool {
        matches!(self, KernelValue::Atom(_))
    }
}

pub fn derived_params(params: &KernelParams) -> Derived {
    let p = params.p.value();
    let alpha = params.p.alpha();
    if params.x == 0.0 {
        return Derived {
            lambda: 0.0,
            alpha,
            beta: 0.0,
        };
    }
    Derived {
        lambda: params.x.powf(2.0 - p) / (params.h * (2.0 - p)),
        alpha,
        beta: params.h * (p - 1.0) * params.x.powf(p - 1.0),
    }
}

/// Probability the kernel puts at zero. The kernel centered at 0 is the point
/// mass at 0.
pub fn point_mass(params: &KernelParams) -> f64 {
    if params.x == 0.0 {
        1.0
    } else {
        (-derived_params(params).lambda).exp()
    }
}

#[inline]
fn ln_gamma(z: f64) -> f64 {
    libm::lgamma(z)
}

/// `j log A - log j! - log Γ(jα)` for real `j ≥ 1`.
#[inline]
fn log_wright_term(j: f64, log_a: f64, alpha: f64) -> f64 {
    j * log_a - ln_gamma(j + 1.0) - ln_gamma(j * alpha)
}

/// Running log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    scaled: f64,
}

impl LogSum {
    fn new(first: f64) -> Self {
        Self {
            max: first,
            scaled: 1.0,
        }
    }

    fn add(&mut self, v: f64) {
        if v > self.max {
            self.scaled = self.scaled * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.scaled += (v - self.max).exp();
        }
    }

    fn ln(&self) -> f64 {
        self.max + self.scaled.ln()
    }
}

/// Integer index maximizing `j log A - log j! - log Γ(jα)`.
///
/// The log-term is concave in real `j`, so a golden-section search on a
/// bracket seeded by the Stirling estimate finds the continuous maximizer;
/// the discrete maximizer is its floor or ceiling.
fn maximizing_index(log_a: f64, alpha: f64, max_index: usize) -> Result<usize> {
    let cap = max_index as f64;
    let stirling = ((log_a - alpha * alpha.ln()) / (1.0 + alpha)).exp();
    let f = |j: f64| log_wright_term(j, log_a, alpha);

    let lo = 1.0_f64;
    let mut hi = (2.0 * stirling + 8.0).max(2.0);
    while f(hi + 1.0) > f(hi) {
        if hi >= cap {
            return Err(Error::NonConvergence {
                max_index,
                context: format!("largest series term lies beyond the cap (log A = {log_a})"),
            });
        }
        hi = (2.0 * hi).min(cap);
    }

    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 0.5 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let below = mid.floor().max(1.0);
    let above = (below + 1.0).min(cap);
    let best = if f(above) > f(below) { above } else { below };
    Ok(best as usize)
}

fn check_positive_pair(t: f64, x: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return domain(format!("subdensity argument must be > 0, got {t}"));
    }
    if !(x > 0.0) {
        return domain(format!("subdensity requires a positive center, got {x}"));
    }
    Ok(())
}

/// Log of the absolutely continuous part of the kernel at `t > 0`.
///
/// Each term is evaluated from scratch with log-gamma; see [`SeriesTable`]
/// for the cached route.
pub fn log_subdensity(t: f64, params: &KernelParams, policy: &SeriesPolicy) -> Result<f64> {
    check_positive_pair(t, params.x)?;
    let Derived {
        lambda,
        alpha,
        beta,
    } = derived_params(params);
    let log_t = t.ln();
    let log_a = lambda.ln() + alpha * (log_t - beta.ln());
    let prefactor = -lambda - t / beta - log_t;

    let start = maximizing_index(log_a, alpha, policy.max_index)?;
    let log_cut = policy.log_cutoff();
    let mut acc = LogSum::new(log_wright_term(start as f64, log_a, alpha));

    let mut j = start + 1;
    loop {
        if j > policy.max_index {
            return Err(Error::NonConvergence {
                max_index: policy.max_index,
                context: format!("upward expansion at t = {t}"),
            });
        }
        let term = log_wright_term(j as f64, log_a, alpha);
        if term - acc.max < log_cut {
            break;
        }
        acc.add(term);
        j += 1;
    }
    for j in (1..start).rev() {
        let term = log_wright_term(j as f64, log_a, alpha);
        if term - acc.max < log_cut {
            break;
        }
        acc.add(term);
    }
    Ok(prefactor + acc.ln())
}

/// `log H_α(A)` with `H_α(A) = Σ_{j≥1} A^j / (j! Γ(jα))`, by forward summation.
///
/// Returns `-∞` for `A = 0`.
pub fn log_wright_series(a: f64, alpha: f64, policy: &SeriesPolicy) -> Result<f64> {
    if !(a.is_finite() && a >= 0.0) {
        return domain(format!("Wright series argument must be >= 0, got {a}"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return domain(format!("Wright series index must be > 0, got {alpha}"));
    }
    if a == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let log_a = a.ln();
    let log_cut = policy.log_cutoff();
    let mut prev = log_wright_term(1.0, log_a, alpha);
    let mut acc = LogSum::new(prev);
    for j in 2..=policy.max_index {
        let term = log_wright_term(j as f64, log_a, alpha);
        if term < prev && term - acc.ln() < log_cut {
            return Ok(acc.ln());
        }
        acc.add(term);
        prev = term;
    }
    Err(Error::NonConvergence {
        max_index: policy.max_index,
        context: format!("Wright series at A = {a}"),
    })
}

/// `H_α(A) = Σ_{j≥1} A^j / (j! Γ(jα))`.
pub fn wright_series(a: f64, alpha: f64, policy: &SeriesPolicy) -> Result<f64> {
    Ok(log_wright_series(a, alpha, policy)?.exp())
}

/// Kernel mass (at `t = 0`) or subdensity (at `t > 0`).
pub fn kernel_eval(t: f64, params: &KernelParams, policy: &SeriesPolicy) -> Result<KernelValue> {
    if !(t.is_finite() && t >= 0.0) {
        return domain(format!("kernel argument must be finite and >= 0, got {t}"));
    }
    if params.x == 0.0 {
        return Ok(if t == 0.0 {
            KernelValue::Atom(1.0)
        } else {
            KernelValue::Subdensity(0.0)
        });
    }
    if t == 0.0 {
        return Ok(KernelValue::Atom(point_mass(params)));
    }
    Ok(KernelValue::Subdensity(
        log_subdensity(t, params, policy)?.exp(),
    ))
}

/// Unit deviance `d_p(u, x) = 2 ∫_x^u (u - t) / t^p dt`.
pub fn unit_deviance(u: f64, x: f64, p: PowerParam) -> Result<f64> {
    if !(u > 0.0 && u.is_finite() && x > 0.0 && x.is_finite()) {
        return domain(format!("unit deviance needs u, x > 0 (got u = {u}, x = {x})"));
    }
    if u == x {
        return Ok(0.0);
    }
    let p = p.value();
    let d = 2.0
        * (u.powf(2.0 - p) / ((1.0 - p) * (2.0 - p)) - u * x.powf(1.0 - p) / (1.0 - p)
            + x.powf(2.0 - p) / (2.0 - p));
    Ok(d.max(0.0))
}

/// Saddlepoint approximation `(2π h u^p)^{-1/2} exp(-d_p(u, x) / 2h)`.
pub fn saddlepoint_subdensity(u: f64, params: &KernelParams) -> Result<f64> {
    let d = unit_deviance(u, params.x, params.p)?;
    let h = params.h;
    let p = params.p.value();
    Ok((2.0 * std::f64::consts::PI * h * u.powf(p)).powf(-0.5) * (-d / (2.0 * h)).exp())
}

/// Local Gaussian approximation `N(x, h x^p)` of the subdensity near its center.
pub fn gaussian_local_subdensity(u: f64, params: &KernelParams) -> Result<f64> {
    if !(u > 0.0 && u.is_finite() && params.x > 0.0) {
        return domain(format!(
            "Gaussian approximation needs u, x > 0 (got u = {u}, x = {})",
            params.x
        ));
    }
    let var = params.h * params.x.powf(params.p.value());
    let z = u - params.x;
    Ok((2.0 * std::f64::consts::PI * var).powf(-0.5) * (-z * z / (2.0 * var)).exp())
}

/// Dispersion giving the Tweedie law with mean `mu` and power `p` a zero mass
/// of `p0`.
pub fn dispersion_from_zero_mass(mu: f64, p: PowerParam, p0: f64) -> Result<f64> {
    if !(mu.is_finite() && mu > 0.0) {
        return domain(format!("mean must be > 0, got {mu}"));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return domain(format!("zero mass must lie in (0, 1), got {p0}"));
    }
    let p = p.value();
    Ok(mu.powf(2.0 - p) / ((2.0 - p) * (-p0.ln())))
}

/// One draw from the Tweedie law with mean `params.x()` and dispersion
/// `params.h()`.
///
/// A sum of `N` independent `Gamma(α, β)` jumps is drawn as a single
/// `Gamma(Nα, β)` variate.
pub fn draw<R: Rng + ?Sized>(params: &KernelParams, rng: &mut R) -> f64 {
    if params.x == 0.0 {
        return 0.0;
    }
    let Derived {
        lambda,
        alpha,
        beta,
    } = derived_params(params);
    let jumps: f64 = Poisson::new(lambda)
        .expect("Poisson rate is finite and positive")
        .sample(rng);
    if jumps == 0.0 {
        return 0.0;
    }
    Gamma::new(jumps * alpha, beta)
        .expect("Gamma parameters are finite and positive")
        .sample(rng)
}

/// `n` independent draws from the Tweedie law with mean `params.x()`,
/// dispersion `params.h()`; deterministic in `seed`.
pub fn sample(params: &KernelParams, n: usize, seed: u64) -> Result<SemicontinuousSample> {
    if n == 0 {
        return domain("sample size must be >= 1");
    }
    if params.x == 0.0 {
        return domain("Tweedie sampling needs a positive mean");
    }
    let mut rng = seed::rng(seed);
    let values = (0..n).map(|_| draw(params, &mut rng)).collect();
    SemicontinuousSample::new(values)
}

/// `P(X ≤ x | X > 0)` for the Tweedie law with mean `params.x()` and
/// dispersion `params.h()`: a Poisson(λ) mixture of Gamma(jα, β) laws.
pub fn positive_part_cdf(params: &KernelParams, x: f64) -> f64 {
    if x <= 0.0 || params.x == 0.0 {
        return 0.0;
    }
    let d = derived_params(params);
    let mut log_w = -d.lambda;
    let mut total = 0.0;
    let mut j = 0.0;
    loop {
        j += 1.0;
        log_w += d.lambda.ln() - f64::ln(j);
        let w = log_w.exp();
        total += w * gamma_lr(j * d.alpha, x / d.beta);
        // past 2λ the remaining Poisson tail is below 2w
        if j > 2.0 * d.lambda && w < 1e-18 {
            break;
        }
    }
    total / -f64::exp_m1(-d.lambda)
}

/// Generalized inverse of a continuous CDF on `(0, ∞)`; `scale` seeds the
/// bracket.
pub fn quantile_by_bisection<F: Fn(f64) -> f64>(cdf: F, prob: f64, scale: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return domain(format!("quantile level must lie in (0, 1), got {prob}"));
    }
    let (mut lo, mut hi) = (0.0, scale.max(1e-3));
    while cdf(hi) < prob {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return domain("quantile bracket diverged");
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Quantities depending only on the center and bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub x: f64,
    pub lambda: f64,
    log_lambda: f64,
    inv_beta: f64,
    log_beta: f64,
}

impl Center {
    /// Probability mass at zero, `e^{-λ}`.
    #[inline]
    pub fn atom(&self) -> f64 {
        (-self.lambda).exp()
    }
}

/// Cached series coefficients for a fixed power.
///
/// Stores `d_j = c_{j+1} - c_j` with `c_j = log j! + log Γ(jα)`, plus
/// `exp(∓d_j)`, so that neighbouring series terms follow from one
/// multiplication. Indices beyond the table fall back to log-gamma.
#[derive(Debug, Clone)]
pub struct SeriesTable {
    power: PowerParam,
    alpha: f64,
    log_alpha: f64,
    policy: SeriesPolicy,
    // index j holds the value for j; slot 0 is unused
    coef: Vec<f64>,
    diff: Vec<f64>,
    exp_neg_diff: Vec<f64>,
    exp_diff: Vec<f64>,
}

const DEFAULT_TABLE_LEN: usize = 4096;

/// Tables handed out by [`SeriesTable::shared`], oldest first.
static SHARED_TABLES: Mutex<Vec<Arc<SeriesTable>>> = Mutex::new(Vec::new());
const SHARED_TABLE_LIMIT: usize = 64;

impl SeriesTable {
    pub fn new(power: PowerParam, policy: SeriesPolicy) -> Self {
        Self::with_capacity(power, policy, DEFAULT_TABLE_LEN)
    }

    /// A process-wide table for `(power, policy)` at the default capacity,
    /// built on first use. Repeated selections over one power grid reuse it.
    pub fn shared(power: PowerParam, policy: SeriesPolicy) -> Arc<Self> {
        let find = |cache: &[Arc<Self>]| {
            cache
                .iter()
                .find(|t| t.power == power && t.policy == policy)
                .cloned()
        };
        if let Some(t) = find(&SHARED_TABLES.lock().unwrap_or_else(|e| e.into_inner())) {
            return t;
        }
        let built = Arc::new(Self::new(power, policy));
        let mut cache = SHARED_TABLES.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = find(&cache) {
            return t;
        }
        if cache.len() >= SHARED_TABLE_LIMIT {
            cache.remove(0);
        }
        cache.push(Arc::clone(&built));
        built
    }

    pub fn with_capacity(power: PowerParam, policy: SeriesPolicy, len: usize) -> Self {
        let alpha = power.alpha();
        let len = len.clamp(2, policy.max_index.max(2) + 1);
        let coef: Vec<f64> = (0..=len)
            .map(|j| {
                if j == 0 {
                    f64::NAN
                } else {
                    let j = j as f64;
                    ln_gamma(j + 1.0) + ln_gamma(j * alpha)
                }
            })
            .collect();
        let diff: Vec<f64> = (0..len)
            .map(|j| {
                if j == 0 {
                    f64::NAN
                } else {
                    let jf = j as f64;
                    (jf + 1.0).ln() + ln_gamma((jf + 1.0) * alpha) - ln_gamma(jf * alpha)
                }
            })
            .collect();
        let exp_neg_diff = diff.iter().map(|d| (-d).exp()).collect();
        let exp_diff = diff.iter().map(|d| d.exp()).collect();
        Self {
            power,
            alpha,
            log_alpha: alpha.ln(),
            policy,
            coef,
            diff,
            exp_neg_diff,
            exp_diff,
        }
    }

    pub fn power(&self) -> PowerParam {
        self.power
    }

    pub fn policy(&self) -> &SeriesPolicy {
        &self.policy
    }

    #[inline]
    fn coef(&self, j: usize) -> f64 {
        match self.coef.get(j) {
            Some(&c) => c,
            None => {
                let j = j as f64;
                ln_gamma(j + 1.0) + ln_gamma(j * self.alpha)
            }
        }
    }

    #[inline]
    fn diff(&self, j: usize) -> f64 {
        match self.diff.get(j) {
            Some(&d) => d,
            None => self.coef(j + 1) - self.coef(j),
        }
    }

    /// Center-dependent quantities for bandwidth `h`; `x` must be positive.
    pub fn center(&self, x: f64, h: f64) -> Center {
        let p = self.power.value();
        let lambda = x.powf(2.0 - p) / (h * (2.0 - p));
        let beta = h * (p - 1.0) * x.powf(p - 1.0);
        Center {
            x,
            lambda,
            log_lambda: lambda.ln(),
            inv_beta: 1.0 / beta,
            log_beta: beta.ln(),
        }
    }

    /// Log-subdensity at `t > 0` (with `log_t = ln t`).
    pub fn log_subdensity_at(&self, t: f64, log_t: f64, c: &Center) -> Result<f64> {
        let log_a = c.log_lambda + self.alpha * (log_t - c.log_beta);
        let prefactor = -c.lambda - t * c.inv_beta - log_t;
        Ok(prefactor + self.log_series(log_a, t)?)
    }

    /// Subdensity at `t > 0`. Pairs whose value is far below the `f64`
    /// underflow threshold return an exact zero without summing.
    pub fn subdensity_at(&self, t: f64, log_t: f64, c: &Center) -> Result<f64> {
        let log_a = c.log_lambda + self.alpha * (log_t - c.log_beta);
        let prefactor = -c.lambda - t * c.inv_beta - log_t;
        let stirling_peak = (1.0 + self.alpha) * self.stirling_index(log_a);
        if prefactor + stirling_peak < NEGLIGIBLE_LOG {
            return Ok(0.0);
        }
        Ok((prefactor + self.log_series(log_a, t)?).exp())
    }

    /// Convenience wrapper taking the raw pair.
    pub fn subdensity(&self, t: f64, x: f64, h: f64) -> Result<f64> {
        check_positive_pair(t, x)?;
        self.subdensity_at(t, t.ln(), &self.center(x, h))
    }

    pub fn log_subdensity(&self, t: f64, x: f64, h: f64) -> Result<f64> {
        check_positive_pair(t, x)?;
        self.log_subdensity_at(t, t.ln(), &self.center(x, h))
    }

    #[inline]
    fn stirling_index(&self, log_a: f64) -> f64 {
        ((log_a - self.alpha * self.log_alpha) / (1.0 + self.alpha)).exp()
    }

    /// `log Σ_j exp(j log A - c_j)`.
    fn log_series(&self, log_a: f64, t: f64) -> Result<f64> {
        let max_index = self.policy.max_index;
        let cutoff = self.policy.cutoff;

        let guess = self.stirling_index(log_a);
        let mut j = if guess.is_finite() {
            (guess.round() as usize).clamp(1, max_index)
        } else {
            max_index
        };
        while j > 1 && log_a < self.diff(j - 1) {
            j -= 1;
        }
        while log_a > self.diff(j) {
            j += 1;
            if j > max_index {
                return Err(self.non_convergence(t));
            }
        }
        let peak = j as f64 * log_a - self.coef(j);

        // ratio recurrences are exact products while A stays representable
        let fast = log_a.abs() < 600.0 && j + 1 < self.diff.len();
        let a = log_a.exp();
        let inv_a = 1.0 / a;

        let mut sum = 1.0;
        let mut term = 1.0;
        let mut k = j;
        loop {
            let ratio = if fast && k < self.diff.len() {
                a * self.exp_neg_diff[k]
            } else {
                (log_a - self.diff(k)).exp()
            };
            term *= ratio;
            if term < cutoff {
                break;
            }
            sum += term;
            k += 1;
            if k > max_index {
                return Err(self.non_convergence(t));
            }
        }
        term = 1.0;
        k = j;
        while k > 1 {
            let ratio = if fast && k - 1 < self.diff.len() {
                inv_a * self.exp_diff[k - 1]
            } else {
                (self.diff(k - 1) - log_a).exp()
            };
            term *= ratio;
            if term < cutoff {
                break;
            }
            sum += term;
            k -= 1;
        }
        Ok(peak + sum.ln())
    }

    fn non_convergence(&self, t: f64) -> Error {
        Error::NonConvergence {
            max_index: self.policy.max_index,
            context: format!("kernel series at t = {t}, p = {}", self.power.value()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pw(p: f64) -> PowerParam {
        PowerParam::new(p).unwrap()
    }

    #[test]
    fn power_param_domain() {
        assert!(PowerParam::new(1.0).is_err());
        assert!(PowerParam::new(2.0).is_err());
        assert!(PowerParam::new(f64::NAN).is_err());
        assert_eq!(pw(1.5).alpha(), 1.0);
    }

    #[test]
    fn derived_params_examples() {
        let k = KernelParams::new(2.0, 1.7222, pw(1.1)).unwrap();
        let d = k.derived();
        assert!((d.lambda - (-(0.3f64).ln())).abs() < 1e-4, "{}", d.lambda);

        let k = KernelParams::new(0.0, 0.3, pw(1.3)).unwrap();
        let d = k.derived();
        assert_eq!(d.lambda, 0.0);
        assert_eq!(d.beta, 0.0);
        assert!((d.alpha - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn point_mass_examples() {
        let k = KernelParams::new(2.0, 1.7222, pw(1.1)).unwrap();
        assert!((point_mass(&k) - 0.3).abs() < 1e-4);
        let k = KernelParams::new(0.0, 0.8, pw(1.7)).unwrap();
        assert_eq!(point_mass(&k), 1.0);

        let mut prev = 1.0;
        for h in [1.0, 0.5, 0.1, 0.05, 0.01, 0.001] {
            let m = point_mass(&KernelParams::new(1.0, h, pw(1.5)).unwrap());
            assert!(m < prev);
            prev = m;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn kernel_eval_dispatch() {
        let pol = SeriesPolicy::default();
        let at0 = KernelParams::new(0.0, 0.4, pw(1.4)).unwrap();
        assert_eq!(kernel_eval(0.0, &at0, &pol).unwrap(), KernelValue::Atom(1.0));
        assert_eq!(
            kernel_eval(3.7, &at0, &pol).unwrap(),
            KernelValue::Subdensity(0.0)
        );
        let k = KernelParams::new(2.0, 1.7222, pw(1.1)).unwrap();
        match kernel_eval(0.0, &k, &pol).unwrap() {
            KernelValue::Atom(v) => assert!((v - 0.3).abs() < 1e-4),
            other => panic!("expected atom, got {other:?}"),
        }
        assert!(kernel_eval(-1.0, &k, &pol).is_err());
    }

    #[test]
    fn log_subdensity_domain_errors() {
        let pol = SeriesPolicy::default();
        let k = KernelParams::new(1.0, 0.1, pw(1.5)).unwrap();
        assert!(matches!(log_subdensity(0.0, &k, &pol), Err(Error::Domain(_))));
        let k0 = KernelParams::new(0.0, 0.1, pw(1.5)).unwrap();
        assert!(matches!(log_subdensity(1.0, &k0, &pol), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_cap_reports_non_convergence() {
        let pol = SeriesPolicy::new(1e-15, 5).unwrap();
        let k = KernelParams::new(2.0, 0.01, pw(1.5)).unwrap();
        assert!(matches!(
            log_subdensity(2.0, &k, &pol),
            Err(Error::NonConvergence { .. })
        ));
        let table = SeriesTable::new(pw(1.5), pol);
        assert!(matches!(
            table.log_subdensity(2.0, 2.0, 0.01),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn wright_series_basics() {
        let pol = SeriesPolicy::default();
        assert_eq!(wright_series(0.0, 0.7, &pol).unwrap(), 0.0);
        let h1 = wright_series(1.0, 0.5, &pol).unwrap();
        let h2 = wright_series(2.0, 0.5, &pol).unwrap();
        assert!(h2 > h1 && h1 > 0.0);
        assert!(wright_series(-1.0, 0.5, &pol).is_err());
    }

    #[test]
    fn table_matches_reference_route() {
        let pol = SeriesPolicy::default();
        for &p in &[1.05, 1.1, 1.3, 1.5, 1.7, 1.95] {
            let table = SeriesTable::new(pw(p), pol);
            for &x in &[0.05, 0.5, 2.0, 9.0] {
                for &h in &[0.005, 0.05, 0.5, 3.0] {
                    for &t in &[1e-6, 0.01, 0.3, 1.9, 2.0, 7.5, 25.0] {
                        let k = KernelParams::new(x, h, pw(p)).unwrap();
                        let reference = log_subdensity(t, &k, &pol).unwrap();
                        let fast = table.log_subdensity(t, x, h).unwrap();
                        // both routes cancel terms of size ~ λ + t/β
                        let d = k.derived();
                        let scale = reference.abs().max(d.lambda).max(t / d.beta).max(1.0);
                        let tol = 1e-13 * scale;
                        assert!(
                            (reference - fast).abs() < tol,
                            "p={p} x={x} h={h} t={t}: {reference} vs {fast}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn negligible_pairs_are_exact_zero_or_tiny() {
        let pol = SeriesPolicy::default();
        let table = SeriesTable::new(pw(1.3), pol);
        let v = table.subdensity(50.0, 1.0, 0.01).unwrap();
        assert_eq!(v, 0.0);
        let lv = table.log_subdensity(50.0, 1.0, 0.01).unwrap();
        assert!(lv < -745.0);
    }

    #[test]
    fn unit_deviance_basics() {
        for &p in &[1.1, 1.5, 1.9] {
            for &x in &[0.3, 1.0, 4.0] {
                assert!(unit_deviance(x, x, pw(p)).unwrap().abs() < 1e-14);
                assert!(unit_deviance(1.3 * x, x, pw(p)).unwrap() > 0.0);
                assert!(unit_deviance(0.7 * x, x, pw(p)).unwrap() > 0.0);
            }
        }
        assert!(unit_deviance(0.0, 1.0, pw(1.5)).is_err());
    }

    #[test]
    fn approximations_at_center() {
        let k = KernelParams::new(1.7, 0.02, pw(1.4)).unwrap();
        let var = 0.02 * 1.7f64.powf(1.4);
        let expect = (2.0 * std::f64::consts::PI * var).powf(-0.5);
        assert!((gaussian_local_subdensity(1.7, &k).unwrap() - expect).abs() < 1e-14);
        assert!((saddlepoint_subdensity(1.7, &k).unwrap() - expect).abs() < 1e-12);
        let a = gaussian_local_subdensity(1.6, &k).unwrap();
        let b = gaussian_local_subdensity(1.8, &k).unwrap();
        assert!((a - b).abs() < 1e-13 * a);
        assert!(saddlepoint_subdensity(1e-3, &k).unwrap() >= 0.0);
    }

    #[test]
    fn dispersion_inverse_of_point_mass() {
        let p = pw(1.1);
        let phi = dispersion_from_zero_mass(2.0, p, 0.3).unwrap();
        assert!((phi - 1.722).abs() < 5e-4, "{phi}");
        let k = KernelParams::new(2.0, phi, p).unwrap();
        assert!((point_mass(&k) - 0.3).abs() < 1e-12);
        assert!(dispersion_from_zero_mass(2.0, p, 1.0).is_err());
        assert!(dispersion_from_zero_mass(2.0, p, 0.0).is_err());
        let big = dispersion_from_zero_mass(2.0, p, 1.0 - 1e-9).unwrap();
        assert!(big > 1e8);
    }

    #[test]
    fn sampler_is_deterministic() {
        let k = KernelParams::new(2.0, 1.0, pw(1.3)).unwrap();
        let a = sample(&k, 500, 11).unwrap();
        let b = sample(&k, 500, 11).unwrap();
        let c = sample(&k, 500, 12).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }
}
