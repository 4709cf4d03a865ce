//! Kernel law checks against oracles built here from first principles.

use proptest::prelude::*;
use tweedie_kde::quadrature::{integrate, integrate_half_line, Tolerance};
use tweedie_kde::tweedie::{
    dispersion_from_zero_mass, draw, gaussian_local_subdensity, kernel_eval, log_subdensity,
    point_mass, saddlepoint_subdensity, sample, unit_deviance, wright_series, KernelValue,
};
use tweedie_kde::{seed, KernelParams, PowerParam, SeriesPolicy, SeriesTable};

fn kp(x: f64, h: f64, p: f64) -> KernelParams {
    KernelParams::new(x, h, PowerParam::new(p).unwrap()).unwrap()
}

fn sub(t: f64, x: f64, h: f64, p: f64) -> f64 {
    log_subdensity(t, &kp(x, h, p), &SeriesPolicy::default())
        .unwrap()
        .exp()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `log I₁(z)` from its power series `Σ (z/2)^{2k+1} / (k! (k+1)!)`.
fn log_bessel_i1(z: f64) -> f64 {
    let lz = (0.5 * z).ln();
    let terms: Vec<f64> = (0..20_000)
        .map(|k| {
            let k = k as f64;
            (2.0 * k + 1.0) * lz - libm::lgamma(k + 1.0) - libm::lgamma(k + 2.0)
        })
        .collect();
    log_sum_exp(&terms)
}

/// `H_α(A) = Σ_{j≥1} A^j / (j! Γ(jα))`, summed term by term up to a fixed
/// index far past the mode.
fn log_wright(a: f64, alpha: f64) -> f64 {
    let la = a.ln();
    let terms: Vec<f64> = (1..40_000)
        .map(|j| {
            let j = j as f64;
            j * la - libm::lgamma(j + 1.0) - libm::lgamma(j * alpha)
        })
        .collect();
    log_sum_exp(&terms)
}

fn lcg(state: &mut u64) -> f64 {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn bessel_closed_form_at_p_one_and_a_half() {
    let mut s = 17;
    for _ in 0..20 {
        let t = 0.05 + 5.0 * lcg(&mut s);
        let x = 0.05 + 5.0 * lcg(&mut s);
        let h = 0.01 + 2.0 * lcg(&mut s);
        // α = 1: λ = 2√x / h, β = h √x / 2
        let lambda = 2.0 * x.sqrt() / h;
        let beta = 0.5 * h * x.sqrt();
        let log_closed = -lambda - t / beta + 0.5 * (lambda / (t * beta)).ln()
            + log_bessel_i1(2.0 * (lambda * t / beta).sqrt());
        let series = log_subdensity(t, &kp(x, h, 1.5), &SeriesPolicy::default()).unwrap();
        let rel = (series - log_closed).exp_m1().abs();
        assert!(rel < 1e-10, "t={t} x={x} h={h}: {rel:e}");
    }
}

#[test]
fn wright_series_identity() {
    let mut s = 3;
    for _ in 0..40 {
        let p = 1.05 + 0.9 * lcg(&mut s);
        let t = 0.02 + 6.0 * lcg(&mut s);
        let x = 0.1 + 4.0 * lcg(&mut s);
        let h = 0.02 + lcg(&mut s);
        let alpha = (2.0 - p) / (p - 1.0);
        let lambda = x.powf(2.0 - p) / (h * (2.0 - p));
        let beta = h * (p - 1.0) * x.powf(p - 1.0);
        let a = lambda * (t / beta).powf(alpha);
        let expect = -lambda - t / beta - t.ln() + log_wright(a, alpha);
        let got = log_subdensity(t, &kp(x, h, p), &SeriesPolicy::default()).unwrap();
        assert!((got - expect).exp_m1().abs() < 1e-12, "p={p} t={t}: {got} vs {expect}");
    }
}

#[test]
fn wright_series_at_one_is_bessel() {
    let h = wright_series(1.0, 1.0, &SeriesPolicy::default()).unwrap();
    let i1 = log_bessel_i1(2.0).exp();
    assert!((h / i1 - 1.0).abs() < 1e-14, "{h} vs {i1}");
    assert_eq!(wright_series(0.0, 0.7, &SeriesPolicy::default()).unwrap(), 0.0);
    let p = SeriesPolicy::default();
    assert!(wright_series(2.0, 0.5, &p).unwrap() > wright_series(1.0, 0.5, &p).unwrap());
}

/// Atom plus `∫ t^k k_h(t; x) dt` for `k = 0, 1, 2`.
fn moments(x: f64, h: f64, p: f64) -> (f64, f64, f64) {
    let table = SeriesTable::new(PowerParam::new(p).unwrap(), SeriesPolicy::default());
    let tol = Tolerance::new(1e-15, 1e-12);
    let sd = (h * x.powf(p)).sqrt();
    let breaks = [x - 2.0 * sd, x, x + 2.0 * sd];
    let m = |k: i32| {
        integrate_half_line(
            |t| t.powi(k) * table.subdensity(t, x, h).unwrap(),
            &breaks,
            tol,
        )
        .unwrap()
        .value
    };
    (point_mass(&kp(x, h, p)) + m(0), m(1), m(2))
}

#[test]
fn kernel_normalizes_with_stated_moments() {
    for &x in &[0.5, 1.0, 2.0, 5.0] {
        for &h in &[0.05, 0.2, 1.0] {
            for &p in &[1.1, 1.5, 1.9] {
                let (mass, m1, m2) = moments(x, h, p);
                let var = m2 - x * x;
                assert!((mass - 1.0).abs() < 1e-8, "mass {x} {h} {p}: {mass}");
                assert!((m1 - x).abs() < 1e-8, "mean {x} {h} {p}: {m1}");
                assert!((var - h * x.powf(p)).abs() < 1e-6, "var {x} {h} {p}: {var}");
            }
        }
    }
}

#[test]
fn deviance_matches_quadrature_of_its_integral() {
    let p = PowerParam::new(1.5).unwrap();
    let closed = unit_deviance(1.0, 2.0, p).unwrap();
    // d = 2 ∫_u^x (t - u) / t^p dt for u < x
    let q = integrate(
        |t: f64| 2.0 * (t - 1.0) / t.powf(1.5),
        1.0,
        2.0,
        Tolerance::new(1e-16, 1e-14),
    )
    .unwrap()
    .value;
    assert!((closed - q).abs() < 1e-10, "{closed} vs {q}");
    assert!((closed - 0.4853).abs() < 5e-5);
}

#[test]
fn deviance_is_locally_quadratic() {
    for &(x, p) in &[(0.7, 1.2), (2.0, 1.5), (3.0, 1.9)] {
        let u = x + 1e-4;
        let d = unit_deviance(u, x, PowerParam::new(p).unwrap()).unwrap();
        let r = d / (u - x).powi(2) * x.powf(p);
        assert!((r - 1.0).abs() < 1e-3, "{r}");
    }
}

#[test]
fn saddlepoint_sharpens_as_h_falls() {
    let (x, p): (f64, f64) = (1.0, 1.3);
    let at = |h: f64| saddlepoint_subdensity(x, &kp(x, h, p)).unwrap() / sub(x, x, h, p);
    assert!((at(1e-3) - 1.0).abs() < 0.01);
    let sup = |h: f64| {
        (0..=40)
            .map(|k| {
                let u = 0.5 + 1.5 * k as f64 / 40.0;
                let exact = sub(u, x, h, p);
                let sp = saddlepoint_subdensity(u, &kp(x, h, p)).unwrap();
                (exact / sp - 1.0).abs()
            })
            .fold(0.0, f64::max)
    };
    let (a, b, c) = (sup(1e-1), sup(1e-2), sup(1e-3));
    assert!(a > b && b > c, "{a} {b} {c}");
}

#[test]
fn gaussian_local_band() {
    let (x, p, h): (f64, f64, f64) = (1.0, 1.5, 1e-4);
    for k in -10..=10 {
        let u = x + h.sqrt() * k as f64 / 10.0;
        let g = gaussian_local_subdensity(u, &kp(x, h, p)).unwrap();
        let r = g / sub(u, x, h, p);
        assert!((r - 1.0).abs() < 0.02, "u={u}: {r}");
        let mirror = gaussian_local_subdensity(2.0 * x - u, &kp(x, h, p)).unwrap();
        assert!((g / mirror - 1.0).abs() < 1e-12);
    }
}

#[test]
fn boundary_blow_up_follows_first_term() {
    let (x, h, p): (f64, f64, f64) = (1.0, 0.3, 1.7);
    let alpha = (2.0 - p) / (p - 1.0);
    let lambda = x.powf(2.0 - p) / (h * (2.0 - p));
    let beta = h * (p - 1.0) * x.powf(p - 1.0);
    let limit = (-lambda).exp() * lambda / (beta.powf(alpha) * libm::tgamma(alpha));
    let scaled = |t: f64| sub(t, x, h, p) * t.powf(1.0 - alpha);
    let errs: Vec<f64> = [1e-6, 1e-10, 1e-14]
        .iter()
        .map(|&t| (scaled(t) / limit - 1.0).abs())
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2] && errs[2] < 1e-4, "{errs:?}");
}

#[test]
fn m1_construction_constants() {
    let p = PowerParam::new(1.1).unwrap();
    let phi = dispersion_from_zero_mass(2.0, p, 0.3).unwrap();
    assert!((phi - 1.722).abs() < 5e-4, "{phi}");
    let k = kp(2.0, phi, 1.1);
    assert!((k.derived().lambda - 1.2040).abs() < 1e-4);
    assert!((point_mass(&k) - 0.3).abs() < 1e-12);
    match kernel_eval(0.0, &k, &SeriesPolicy::default()).unwrap() {
        KernelValue::Atom(v) => assert!((v - 0.3).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sampler_moments() {
    let (mu, phi, p) = (2.0, 1.7221, 1.1);
    let k = kp(mu, phi, p);
    let n = 100_000;
    let s = sample(&k, n, 2024).unwrap();
    let nf = n as f64;
    let zeros = s.zero_count() as f64 / nf;
    let p0 = point_mass(&k);
    assert!((zeros - p0).abs() < 3.0 * (p0 * (1.0 - p0) / nf).sqrt());
    let v = s.values();
    let mean = v.iter().sum::<f64>() / nf;
    let c2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let c4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let target_var = phi * mu.powf(p);
    assert!((mean - mu).abs() < 3.0 * (target_var / nf).sqrt(), "{mean}");
    assert!((c2 - target_var).abs() < 3.0 * ((c4 - c2 * c2) / nf).sqrt(), "{c2}");
}

#[test]
fn sampler_is_the_draw_stream() {
    let k = kp(1.3, 0.4, 1.6);
    let s = sample(&k, 50, 8).unwrap();
    let mut rng = seed::rng(8);
    let mut manual: Vec<f64> = (0..50).map(|_| draw(&k, &mut rng)).collect();
    manual.sort_by(f64::total_cmp);
    assert_eq!(s.values(), &manual[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deviance_nonnegative_and_zero_on_diagonal(
        u in 0.01f64..20.0, x in 0.01f64..20.0, p in 1.01f64..1.99,
    ) {
        let pp = PowerParam::new(p).unwrap();
        prop_assert!(unit_deviance(u, x, pp).unwrap() >= 0.0);
        prop_assert_eq!(unit_deviance(x, x, pp).unwrap(), 0.0);
    }

    #[test]
    fn kernel_values_in_range(
        t in 0.0f64..10.0, x in 0.0f64..10.0, h in 0.01f64..3.0, p in 1.02f64..1.98,
    ) {
        match kernel_eval(t, &kp(x, h, p), &SeriesPolicy::default()).unwrap() {
            KernelValue::Atom(v) => prop_assert!((0.0..=1.0).contains(&v)),
            KernelValue::Subdensity(v) => prop_assert!(v >= 0.0 && v.is_finite()),
        }
    }

    #[test]
    fn wright_series_increasing(a in 0.0f64..50.0, da in 0.01f64..5.0, alpha in 0.05f64..5.0) {
        let pol = SeriesPolicy::default();
        prop_assert!(wright_series(a + da, alpha, &pol).unwrap() > wright_series(a, alpha, &pol).unwrap());
    }

    #[test]
    fn dispersion_inverts_point_mass(mu in 0.1f64..10.0, p in 1.01f64..1.99, p0 in 0.01f64..0.99) {
        let phi = dispersion_from_zero_mass(mu, PowerParam::new(p).unwrap(), p0).unwrap();
        prop_assert!((point_mass(&kp(mu, phi, p)) - p0).abs() < 1e-12);
    }

    #[test]
    fn table_route_agrees_with_reference(
        t in 0.01f64..8.0, x in 0.05f64..8.0, h in 0.02f64..2.0, p in 1.05f64..1.95,
    ) {
        let table = SeriesTable::new(PowerParam::new(p).unwrap(), SeriesPolicy::default());
        let a = table.log_subdensity(t, x, h).unwrap();
        let b = log_subdensity(t, &kp(x, h, p), &SeriesPolicy::default()).unwrap();
        prop_assert!((a - b).abs() < 1e-11 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}
