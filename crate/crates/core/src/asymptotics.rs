//! Leading-order risk of the estimator at a known target.
//!
//! With `g` the density of the positive part and `g''` its second
//! derivative, pointwise
//!
//! ```text
//! bias     ≈ ½ h x^p g''(x)
//! variance ≈ g(x) / (2√π x^{p/2}) · n^{-1} h^{-1/2}
//! ```
//!
//! and integrated over `(0, ∞)` the same terms become
//! `¼ h² R_p + n^{-1} h^{-1/2} S_p / (2√π)` with
//! `R_p = ∫ x^{2p} g''²` and `S_p = ∫ x^{-p/2} g`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::quadrature::{integrate_half_line, Tolerance};
use crate::tweedie::PowerParam;

pub type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// How `g''` is obtained.
#[derive(Clone)]
pub enum Curvature {
    Analytic(DensityFn),
    /// Central differences with step `1e-4·x`; about 1e-7 relative accuracy
    /// for smooth targets.
    FiniteDifference,
    Unavailable,
}

/// Relative step of the central second difference.
pub const FD_STEP: f64 = 1e-4;

/// A mixed target: atom `p0` at zero and positive part `g_plus` on `(0, ∞)`.
#[derive(Clone)]
pub struct TargetDensity {
    g_plus: DensityFn,
    curvature: Curvature,
    p0: f64,
    breaks: Vec<f64>,
}

impl fmt::Debug for TargetDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let curvature = match self.curvature {
            Curvature::Analytic(_) => "analytic",
            Curvature::FiniteDifference => "finite-difference",
            Curvature::Unavailable => "unavailable",
        };
        f.debug_struct("TargetDensity")
            .field("p0", &self.p0)
            .field("curvature", &curvature)
            .field("breaks", &self.breaks)
            .finish()
    }
}

impl TargetDensity {
    /// Builds a target and checks that `g_plus` carries mass `1 - p0` within
    /// `1e-6`. If the quadrature itself fails the check is skipped.
    ///
    /// `breaks` mark where `g_plus` changes character (modes, scale); they
    /// guide every quadrature over the target.
    pub fn new(g_plus: DensityFn, curvature: Curvature, p0: f64, breaks: Vec<f64>) -> Result<Self> {
        let target = Self::unchecked(g_plus, curvature, p0, breaks)?;
        if let Ok(mass) = integrate_half_line(&*target.g_plus, &target.breaks, Tolerance::new(1e-12, 1e-10)) {
            if (mass.value - (1.0 - p0)).abs() > 1e-6 {
                return domain(format!(
                    "positive part integrates to {}, expected {}",
                    mass.value,
                    1.0 - p0
                ));
            }
        }
        Ok(target)
    }

    /// Builds a target without the mass check.
    pub fn unchecked(
        g_plus: DensityFn,
        curvature: Curvature,
        p0: f64,
        breaks: Vec<f64>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p0) {
            return domain(format!("zero mass must lie in [0, 1], got {p0}"));
        }
        Ok(Self {
            g_plus,
            curvature,
            p0,
            breaks,
        })
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    /// `g(x)` for `x > 0`.
    pub fn g(&self, x: f64) -> f64 {
        (self.g_plus)(x)
    }

    pub fn density_fn(&self) -> DensityFn {
        Arc::clone(&self.g_plus)
    }

    /// `g''(x)` for `x > 0`.
    pub fn g_second(&self, x: f64) -> Result<f64> {
        match &self.curvature {
            Curvature::Analytic(f) => Ok(f(x)),
            Curvature::FiniteDifference => {
                let d = FD_STEP * x;
                Ok((self.g(x + d) - 2.0 * self.g(x) + self.g(x - d)) / (d * d))
            }
            Curvature::Unavailable => Err(Error::MissingDerivative),
        }
    }
}

fn check_point(x: f64) -> Result<()> {
    if !(x.is_finite() && x > 0.0) {
        return domain(format!("asymptotic formulas need x > 0, got {x}"));
    }
    Ok(())
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return domain(format!("bandwidth must be > 0, got {h}"));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return domain("sample size must be >= 1");
    }
    Ok(())
}

/// `½ h x^p g''(x)`.
pub fn bias_leading(x: f64, h: f64, p: f64, target: &TargetDensity) -> Result<f64> {
    check_point(x)?;
    check_bandwidth(h)?;
    let p = PowerParam::new(p)?.value();
    Ok(0.5 * h * x.powf(p) * target.g_second(x)?)
}

/// `g(x) n^{-1} h^{-1/2} / (2√π x^{p/2})`.
pub fn variance_leading(x: f64, h: f64, n: usize, p: f64, target: &TargetDensity) -> Result<f64> {
    check_point(x)?;
    check_bandwidth(h)?;
    check_n(n)?;
    let p = PowerParam::new(p)?.value();
    Ok(target.g(x) / (2.0 * PI.sqrt() * x.powf(p / 2.0) * n as f64 * h.sqrt()))
}

/// Squared leading bias plus leading variance.
pub fn mse_leading(x: f64, h: f64, n: usize, p: f64, target: &TargetDensity) -> Result<f64> {
    let b = bias_leading(x, h, p, target)?;
    Ok(b * b + variance_leading(x, h, n, p, target)?)
}

/// `{g / (2√π x^{5p/2} g''²)}^{2/5} n^{-2/5}`.
pub fn h_opt_pointwise(x: f64, p: f64, target: &TargetDensity, n: usize) -> Result<f64> {
    check_point(x)?;
    check_n(n)?;
    let p = PowerParam::new(p)?.value();
    let g2 = target.g_second(x)?;
    if g2 == 0.0 {
        return Err(Error::DegenerateCurvature);
    }
    let g = target.g(x);
    Ok((g / (2.0 * PI.sqrt() * x.powf(2.5 * p) * g2 * g2)).powf(0.4) * (n as f64).powf(-0.4))
}

/// `(5/4) (g⁴ g''² / 16π²)^{1/5} n^{-4/5}`, free of `p`.
pub fn optimal_mse(x: f64, target: &TargetDensity, n: usize) -> Result<f64> {
    check_point(x)?;
    check_n(n)?;
    let g = target.g(x);
    let g2 = target.g_second(x)?;
    Ok(1.25 * (g.powi(4) * g2 * g2 / (16.0 * PI * PI)).powf(0.2) * (n as f64).powf(-0.8))
}

/// Pointwise leading risk at `(x, h, n, p)` together with the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub bias_leading: f64,
    pub variance_leading: f64,
    pub mse_leading: f64,
    pub h_opt: f64,
    pub mse_at_opt: f64,
}

pub fn risk_report(x: f64, h: f64, n: usize, p: f64, target: &TargetDensity) -> Result<RiskReport> {
    let bias = bias_leading(x, h, p, target)?;
    let variance = variance_leading(x, h, n, p, target)?;
    let h_opt = h_opt_pointwise(x, p, target, n)?;
    Ok(RiskReport {
        bias_leading: bias,
        variance_leading: variance,
        mse_leading: bias * bias + variance,
        h_opt,
        mse_at_opt: mse_leading(x, h_opt, n, p, target)?,
    })
}

/// `R_p = ∫ x^{2p} g''²` and `S_p = ∫ x^{-p/2} g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiseFunctionals {
    pub r_p: f64,
    pub s_p: f64,
}

/// Tolerances used for `R_p` and `S_p`.
pub fn functional_tolerance() -> Tolerance {
    Tolerance::new(1e-14, 1e-8)
}

pub fn mise_functionals(p: f64, target: &TargetDensity, tol: Tolerance) -> Result<MiseFunctionals> {
    let p = PowerParam::new(p)?.value();
    if let Curvature::Unavailable = target.curvature {
        return Err(Error::MissingDerivative);
    }
    let r = integrate_half_line(
        |x: f64| {
            let g2 = target.g_second(x).unwrap_or(f64::NAN);
            x.powf(2.0 * p) * g2 * g2
        },
        &target.breaks,
        tol,
    )
    .map_err(divergent)?;
    let s = integrate_half_line(|x: f64| x.powf(-p / 2.0) * target.g(x), &target.breaks, tol)
        .map_err(divergent)?;
    Ok(MiseFunctionals {
        r_p: r.value,
        s_p: s.value,
    })
}

fn divergent(e: Error) -> Error {
    match e {
        Error::Quadrature(msg) => Error::DivergentFunctional(msg),
        other => other,
    }
}

/// `{S_p / (2√π R_p)}^{2/5} n^{-2/5}`.
pub fn h_opt_mise_from(f: &MiseFunctionals, n: usize) -> Result<f64> {
    check_n(n)?;
    if f.r_p == 0.0 {
        return Err(Error::DegenerateCurvature);
    }
    Ok((f.s_p / (2.0 * PI.sqrt() * f.r_p)).powf(0.4) * (n as f64).powf(-0.4))
}

pub fn h_opt_mise(p: f64, target: &TargetDensity, n: usize) -> Result<f64> {
    h_opt_mise_from(&mise_functionals(p, target, functional_tolerance())?, n)
}

/// `¼ h² R_p + n^{-1} h^{-1/2} S_p / (2√π)`.
pub fn mise_leading_from(f: &MiseFunctionals, h: f64, n: usize) -> Result<f64> {
    check_bandwidth(h)?;
    check_n(n)?;
    Ok(0.25 * h * h * f.r_p + f.s_p / (2.0 * PI.sqrt() * n as f64 * h.sqrt()))
}

pub fn mise_leading(h: f64, n: usize, p: f64, target: &TargetDensity) -> Result<f64> {
    mise_leading_from(&mise_functionals(p, target, functional_tolerance())?, h, n)
}

/// `(5/4) (R_p S_p⁴ / 16π²)^{1/5} n^{-4/5}`.
pub fn optimal_mise_from(f: &MiseFunctionals, n: usize) -> Result<f64> {
    check_n(n)?;
    Ok(1.25 * (f.r_p * f.s_p.powi(4) / (16.0 * PI * PI)).powf(0.2) * (n as f64).powf(-0.8))
}

/// Parameters `(mean_shift, variance)` of the normal limit of
/// `n^{1/2} h^{1/4} (ĝ_h(x) - g(x))` when `n h^{5/2} → λ_limit`.
pub fn clt_params(x: f64, p: f64, target: &TargetDensity, lambda_limit: f64) -> Result<(f64, f64)> {
    check_point(x)?;
    let p = PowerParam::new(p)?.value();
    if !(lambda_limit.is_finite() && lambda_limit >= 0.0) {
        return domain(format!("λ limit must be >= 0, got {lambda_limit}"));
    }
    let shift = if lambda_limit == 0.0 {
        0.0
    } else {
        0.5 * x.powf(p) * target.g_second(x)? * lambda_limit.sqrt()
    };
    let variance = target.g(x) / (2.0 * PI.sqrt() * x.powf(p / 2.0));
    Ok((shift, variance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gamma_target() -> TargetDensity {
        // 0.6 · Gamma(3, 2) density, with its exact second derivative
        let c = 0.6 * 8.0 / 2.0;
        let g: DensityFn = Arc::new(move |x: f64| c * x * x * (-2.0 * x).exp());
        let g2: DensityFn =
            Arc::new(move |x: f64| c * (2.0 - 8.0 * x + 4.0 * x * x) * (-2.0 * x).exp());
        TargetDensity::new(g, Curvature::Analytic(g2), 0.4, vec![1.0]).unwrap()
    }

    #[test]
    fn mass_check_rejects_wrong_p0() {
        let g: DensityFn = Arc::new(|x: f64| (-x).exp());
        assert!(TargetDensity::new(Arc::clone(&g), Curvature::FiniteDifference, 0.0, vec![1.0]).is_ok());
        assert!(TargetDensity::new(g, Curvature::FiniteDifference, 0.3, vec![1.0]).is_err());
    }

    #[test]
    fn finite_difference_tracks_analytic() {
        let t = gamma_target();
        let fd = TargetDensity::unchecked(t.density_fn(), Curvature::FiniteDifference, 0.4, vec![1.0])
            .unwrap();
        for &x in &[0.3, 1.0, 2.5] {
            let a = t.g_second(x).unwrap();
            let b = fd.g_second(x).unwrap();
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-3), "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn formulas_scale_as_stated() {
        let t = gamma_target();
        let b1 = bias_leading(1.3, 0.1, 1.4, &t).unwrap();
        let b2 = bias_leading(1.3, 0.2, 1.4, &t).unwrap();
        assert!((b2 - 2.0 * b1).abs() < 1e-15);
        let v1 = variance_leading(1.3, 0.2, 50, 1.4, &t).unwrap();
        let v2 = variance_leading(1.3, 0.1, 50, 1.4, &t).unwrap();
        assert!((v2 / v1 - 2f64.sqrt()).abs() < 1e-13);
        let h1 = h_opt_pointwise(1.3, 1.4, &t, 100).unwrap();
        let h2 = h_opt_pointwise(1.3, 1.4, &t, 3200).unwrap();
        assert!((h1 / h2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn optimum_reproduces_closed_form() {
        let t = gamma_target();
        for &(x, p, n) in &[(0.7, 1.2, 100), (1.9, 1.7, 5000)] {
            let h = h_opt_pointwise(x, p, &t, n).unwrap();
            let m = mse_leading(x, h, n, p, &t).unwrap();
            let c = optimal_mse(x, &t, n).unwrap();
            assert!((m - c).abs() <= 1e-12 * c, "{m} vs {c}");
        }
    }

    #[test]
    fn zero_curvature_is_degenerate() {
        let g: DensityFn = Arc::new(|x: f64| (-x).exp());
        let flat: DensityFn = Arc::new(|_| 0.0);
        let t = TargetDensity::unchecked(g, Curvature::Analytic(flat), 0.0, vec![1.0]).unwrap();
        assert_eq!(bias_leading(1.0, 0.3, 1.5, &t).unwrap(), 0.0);
        assert!(matches!(
            h_opt_pointwise(1.0, 1.5, &t, 10),
            Err(Error::DegenerateCurvature)
        ));
    }

    #[test]
    fn missing_derivative() {
        let g: DensityFn = Arc::new(|x: f64| (-x).exp());
        let t = TargetDensity::unchecked(g, Curvature::Unavailable, 0.0, vec![1.0]).unwrap();
        assert!(matches!(bias_leading(1.0, 0.3, 1.5, &t), Err(Error::MissingDerivative)));
        assert!(variance_leading(1.0, 0.3, 5, 1.5, &t).is_ok());
        assert_eq!(clt_params(1.0, 1.5, &t, 0.0).unwrap().0, 0.0);
        assert!(clt_params(1.0, 1.5, &t, 0.5).is_err());
    }

    #[test]
    fn all_mass_at_zero_has_null_functionals() {
        let g: DensityFn = Arc::new(|_| 0.0);
        let t = TargetDensity::new(Arc::clone(&g), Curvature::Analytic(g), 1.0, vec![1.0]).unwrap();
        let f = mise_functionals(1.5, &t, functional_tolerance()).unwrap();
        assert_eq!((f.r_p, f.s_p), (0.0, 0.0));
        assert!(matches!(h_opt_mise_from(&f, 10), Err(Error::DegenerateCurvature)));
    }
}
