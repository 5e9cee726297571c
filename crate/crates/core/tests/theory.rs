use std::f64::consts::{FRAC_PI_2, PI};

use fissionlab::decompose::{gaussian_fission, ScalePlugin};
use fissionlab::estimate::cross_cov;
use fissionlab::samplers::sample_mvn;
use fissionlab::theory::dist::noncentral_t_cdf;
use fissionlab::theory::{
    cov_conditional_fission, cov_marginal_fission_conditional, cov_nb_thin, cov_prop1, fission_covariance_table,
    fission_variances, halfnormal_cluster_moments, mixture_marginal_cov, rho_fission, type1_curve, type1_t, type1_z,
    within_cluster_var_x2, BiasSpec, Type1Variant,
};
use fissionlab::{CovMatrix, Error, GaussianComponent, MixtureSpec, Seed};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

/// P(Z ≤ x√(V/df) − δ) integrated over the χ²(df) density with V = s²,
/// composite Simpson on s ∈ [0, s_max].
fn nct_quadrature(x: f64, df: f64, delta: f64) -> f64 {
    let phi = std_normal();
    let log_norm = (0.5 * df - 1.0) * 2f64.ln() + ln_gamma(0.5 * df);
    let s_max = (df + 60.0 * (2.0 * df).sqrt() + 100.0).sqrt();
    let m = 200_000;
    let h = s_max / m as f64;
    // density of s = √V is s^(df−1) e^(−s²/2) / (2^(df/2−1) Γ(df/2))
    let g = |s: f64| (s.powf(df - 1.0) * (-0.5 * s * s - log_norm).exp()) * phi.cdf(x * s / df.sqrt() - delta);
    let mut total = g(0.0) + g(s_max);
    for i in 1..m {
        total += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    total * h / 3.0
}

fn two_sided_mc(draw: impl Fn(&mut fissionlab::rng::SimRng) -> f64, q: f64, seed: u64) -> f64 {
    let mut rng = Seed(seed).rng();
    let m = 1_000_000;
    (0..m).filter(|_| draw(&mut rng).abs() > q).count() as f64 / m as f64
}

#[test]
fn rho_examples() {
    assert_eq!(rho_fission(&BiasSpec::new(3.0, 3.0, 0.4).unwrap()), 0.0);
    let r = rho_fission(&BiasSpec::new(2.0, 1.0, 1.0).unwrap());
    assert!((r - 1.0 / 3.0).abs() < 1e-15);
    assert!(BiasSpec::new(1.0, 0.0, 1.0).is_err());
    assert!((BiasSpec::from_relative_bias(2.0, 0.5, 1.0).unwrap().b2 - 3.0).abs() < 1e-15);
}

#[test]
fn rho_matches_simulated_correlation() {
    let n = 1_000_000;
    let x = sample_mvn(&[0.0], &CovMatrix::diagonal(&[2.0]).unwrap(), n, Seed(1)).unwrap();
    let pair = gaussian_fission(&x, 1.0, &ScalePlugin::marginal_cov(CovMatrix::identity(1)), Seed(2)).unwrap();
    let cc = cross_cov(pair.x1.view(), pair.x2.view()).unwrap();
    let v1 = cross_cov(pair.x1.view(), pair.x1.view()).unwrap().estimate[[0, 0]];
    let v2 = cross_cov(pair.x2.view(), pair.x2.view()).unwrap().estimate[[0, 0]];
    let cor = cc.estimate[[0, 0]] / (v1 * v2).sqrt();
    assert!((cor - 1.0 / 3.0).abs() <= 0.005, "{cor}");
    let (e1, e2) = fission_variances(&BiasSpec::new(2.0, 1.0, 1.0).unwrap());
    assert!((v1 - e1).abs() < 0.02 && (v2 - e2).abs() < 0.02);
}

#[test]
fn rho_sign_follows_bias() {
    let mut rng = Seed(3).rng();
    for _ in 0..20 {
        let s = rng.random_range(0.1..5.0);
        let b = rng.random_range(0.1..5.0);
        let t = rng.random_range(0.1..3.0);
        let r = rho_fission(&BiasSpec::new(s, b, t).unwrap());
        assert_eq!(r.signum(), (s - b).signum());
        assert!(r.abs() < 1.0);
    }
}

#[test]
fn type1_z_examples() {
    for n in [2, 10, 100, 5000] {
        assert!((type1_z(0.0, n, 0.05).unwrap() - 0.05).abs() < 1e-12);
    }
    let delta = 0.1 * 10.0 / (FRAC_PI_2 - 0.01).sqrt();
    let q = 1.959_963_984_540_054;
    let mc = two_sided_mc(|r| r.sample::<f64, _>(StandardNormal) + delta, q, 4);
    let a = type1_z(0.1, 100, 0.05).unwrap();
    assert!((a - mc).abs() <= 0.01, "{a} vs {mc}");
    // closed form via an independent normal CDF (statrs erf is good to ~1e-11)
    let phi = std_normal();
    let b = 1.0 - phi.cdf(q - delta) + phi.cdf(-q - delta);
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn type1_monotone() {
    let rhos = [0.005, 0.01, 0.02, 0.05, 0.1];
    for n in [10, 100, 1000] {
        let a: Vec<f64> = rhos.iter().map(|&r| type1_z(r, n, 0.05).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[1] > w[0]), "{a:?}");
        for &r in &rhos {
            assert_eq!(type1_z(r, n, 0.05).unwrap(), type1_z(-r, n, 0.05).unwrap());
        }
    }
    let a: Vec<f64> = [10, 50, 200, 1000].iter().map(|&n| type1_z(0.05, n, 0.05).unwrap()).collect();
    assert!(a.windows(2).all(|w| w[1] > w[0]), "{a:?}");
}

#[test]
fn type1_domain() {
    assert!(matches!(type1_z(1.3, 100, 0.05), Err(Error::Domain(_))));
    assert!(matches!(type1_t(-1.26, 100, 0.05), Err(Error::Domain(_))));
    assert!(type1_z(0.1, 100, 1.0).is_err());
    assert!(type1_t(0.1, 2, 0.05).is_err());
}

#[test]
fn type1_t_examples() {
    for n in [3, 20, 500] {
        assert!((type1_t(0.0, n, 0.05).unwrap() - 0.05).abs() < 1e-9);
    }
    assert!((type1_t(0.05, 10_000, 0.05).unwrap() - type1_z(0.05, 10_000, 0.05).unwrap()).abs() < 1e-3);

    let n = 50;
    let delta = 0.1 * (n as f64).sqrt() / (FRAC_PI_2 - 0.01).sqrt();
    let q = StudentsT::new(0.0, 1.0, 48.0).unwrap().inverse_cdf(0.975);
    let chi = ChiSquared::new(48.0).unwrap();
    let mc = two_sided_mc(
        |r| (r.sample::<f64, _>(StandardNormal) + delta) / (r.sample::<f64, _>(chi) / 48.0).sqrt(),
        q,
        5,
    );
    let a = type1_t(0.1, n, 0.05).unwrap();
    assert!((a - mc).abs() <= 0.01, "{a} vs {mc}");
}

#[test]
fn curve_is_anchored_at_zero_bias() {
    for tau in [0.3, 1.0, 2.5] {
        for n in [20, 500] {
            let c = type1_curve(1.7, tau, &[-0.4, 0.0, 0.4], n, 0.05, Type1Variant::Z).unwrap();
            assert!((c.grid[1].1 - 0.05).abs() < 1e-12);
            assert!(c.grid[0].1 > 0.05 && c.grid[2].1 > 0.05);
        }
    }
    let c = type1_curve(1.0, 1.0, &[0.0], 100, 0.05, Type1Variant::StudentT).unwrap();
    assert!((c.grid[0].1 - 0.05).abs() < 1e-9);
}

#[test]
fn noncentral_t_examples() {
    assert_eq!(noncentral_t_cdf(0.0, 7.0, 0.0).unwrap(), 0.5);
    let central = noncentral_t_cdf(1.812, 10.0, 0.0).unwrap();
    assert!((central - StudentsT::new(0.0, 1.0, 10.0).unwrap().cdf(1.812)).abs() < 1e-9);
    assert!((central - 0.95).abs() < 1e-3);
    let v = noncentral_t_cdf(2.0, 5.0, 2.0).unwrap();
    let oracle = nct_quadrature(2.0, 5.0, 2.0);
    assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
    assert!(noncentral_t_cdf(1.0, 0.0, 1.0).is_err());
}

#[test]
fn noncentral_t_against_quadrature() {
    for &(x, df, delta) in
        &[(-1.5, 3.0, 0.5), (0.5, 1.0, -1.0), (3.0, 48.0, 1.7), (-2.0, 20.0, -2.5), (0.0, 8.0, 1.0), (6.0, 12.0, 4.0)]
    {
        let v = noncentral_t_cdf(x, df, delta).unwrap();
        let oracle = nct_quadrature(x, df, delta);
        assert!((v - oracle).abs() < 1e-8, "({x}, {df}, {delta}): {v} vs {oracle}");
    }
}

#[test]
fn noncentral_t_monotone_in_x() {
    for &(df, delta) in &[(2.0, 1.0), (30.0, -2.0), (5.0, 3.5)] {
        let mut prev = 0.0;
        for i in -80..=80 {
            let v = noncentral_t_cdf(i as f64 * 0.1, df, delta).unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }
}

fn mix1(weights: Vec<f64>, means: &[f64], vars: &[f64]) -> MixtureSpec {
    MixtureSpec::gaussian(
        weights,
        means
            .iter()
            .zip(vars)
            .map(|(&m, &v)| GaussianComponent { mean: vec![m], cov: CovMatrix::diagonal(&[v]).unwrap() })
            .collect(),
    )
    .unwrap()
}

#[test]
fn covariance_identities() {
    let one = mix1(vec![1.0], &[4.0], &[2.0]);
    assert_eq!(cov_conditional_fission(&one).unwrap().get(0, 0), 0.0);
    let two = mix1(vec![0.5, 0.5], &[-3.0, 3.0], &[1.0, 1.0]);
    assert_eq!(cov_conditional_fission(&two).unwrap().get(0, 0), 9.0);
    assert_eq!(mixture_marginal_cov(&two).unwrap().get(0, 0), 10.0);

    let s = CovMatrix::diagonal(&[1.0]).unwrap();
    let big = CovMatrix::diagonal(&[10.0]).unwrap();
    assert_eq!(cov_marginal_fission_conditional(&s, &s).unwrap().get(0, 0), 0.0);
    assert_eq!(cov_marginal_fission_conditional(&s, &big).unwrap().get(0, 0), -9.0);
    assert_eq!(cov_prop1(&s, &CovMatrix::diagonal(&[1.5]).unwrap()).unwrap().get(0, 0), -0.5);
    assert!(matches!(cov_prop1(&s, &CovMatrix::identity(2)), Err(Error::DimMismatch(_))));

    let a = CovMatrix::new(array![[2.0, 0.3], [0.3, 1.0]]).unwrap();
    let b = CovMatrix::new(array![[1.0, -0.2], [-0.2, 4.0]]).unwrap();
    let ab = cov_prop1(&a, &b).unwrap();
    assert_eq!(ab.as_array(), &(-cov_prop1(&b, &a).unwrap().into_array()));
    assert_eq!(ab.get(0, 1), ab.get(1, 0));
}

#[test]
fn prop1_simulated() {
    let n = 1_000_000;
    let x = sample_mvn(&[0.0], &CovMatrix::identity(1), n, Seed(6)).unwrap();
    let plugin = CovMatrix::diagonal(&[1.5]).unwrap();
    let pair = gaussian_fission(&x, 0.8, &ScalePlugin::marginal_cov(plugin.clone()), Seed(7)).unwrap();
    let cc = cross_cov(pair.x1.view(), pair.x2.view()).unwrap();
    assert!(cc.max_z(cov_prop1(&CovMatrix::identity(1), &plugin).unwrap().as_array()) <= 3.0);
}

#[test]
fn total_variance_decomposition() {
    let mut rng = Seed(8).rng();
    for _ in 0..10 {
        let g = rng.random_range(1..5);
        let p = rng.random_range(1..4);
        let mut w: Vec<f64> = (0..g).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let comps: Vec<GaussianComponent> = (0..g)
            .map(|_| {
                let a = Array2::from_shape_fn((p, p), |_| rng.random_range(-1.0..1.0));
                GaussianComponent {
                    mean: (0..p).map(|_| rng.random_range(-5.0..5.0)).collect(),
                    cov: CovMatrix::symmetrized(a.dot(&a.t()) + Array2::<f64>::eye(p) * 0.1).unwrap(),
                }
            })
            .collect();
        let spec = MixtureSpec::gaussian(w.clone(), comps.clone()).unwrap();
        let mut within = Array2::<f64>::zeros((p, p));
        for (wg, c) in w.iter().zip(&comps) {
            within = within + c.cov.as_array() * *wg;
        }
        let expected = mixture_marginal_cov(&spec).unwrap().into_array() - within;
        let got = cov_conditional_fission(&spec).unwrap();
        assert!(got.as_array().iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn covariance_table_rows() {
    let two = mix1(vec![0.5, 0.5], &[-3.0, 3.0], &[1.0, 1.0]);
    let rows = fission_covariance_table(&two).unwrap();
    assert_eq!(rows.len(), 6);
    let get = |mode: &str, scope: &str| {
        rows.iter().find(|r| r.mode == mode && r.scope == scope).unwrap().covariance.get(0, 0)
    };
    assert_eq!(get("conditional", "overall"), 9.0);
    assert_eq!(get("conditional", "component 1"), 0.0);
    assert_eq!(get("marginal", "overall"), 0.0);
    assert_eq!(get("marginal", "component 2"), -9.0);
}

#[test]
fn nb_thin_covariance_formula() {
    assert_eq!(cov_nb_thin(5.0, 5.0, 5.0, 0.5).unwrap(), 0.0);
    assert!((cov_nb_thin(5.0, 5.0, 20.0, 0.5).unwrap() - 0.892_857_142_857_142_9).abs() < 1e-12);
    let mut rng = Seed(9).rng();
    for _ in 0..20 {
        let theta = rng.random_range(0.5..50.0);
        let theta_hat = rng.random_range(0.5..50.0);
        let c = cov_nb_thin(rng.random_range(0.5..50.0), theta, theta_hat, rng.random_range(0.05..0.95)).unwrap();
        assert_eq!(c.signum(), (theta_hat - theta).signum());
    }
    assert!(cov_nb_thin(5.0, 5.0, 5.0, 1.0).is_err());
    assert!(cov_nb_thin(0.0, 5.0, 5.0, 0.5).is_err());
}

#[test]
fn halfnormal_moments() {
    let m = halfnormal_cluster_moments(0.0, 1.0).unwrap();
    let s = (2.0 / PI).sqrt();
    assert!((m.mean_upper - s).abs() < 1e-15 && (m.mean_lower + s).abs() < 1e-15);
    assert!((m.var_within - 0.363_380_227_632_418_7).abs() < 1e-12);
    for v in [0.5, 2.0, 7.0] {
        let mv = halfnormal_cluster_moments(1.0, v).unwrap();
        assert!((mv.var_within - v * m.var_within).abs() < 1e-12);
    }
    assert!(halfnormal_cluster_moments(0.0, 0.0).is_err());

    let mut rng = Seed(10).rng();
    let upper: Vec<f64> =
        (0..1_000_000).map(|_| rng.sample::<f64, _>(StandardNormal)).filter(|v| *v > 0.0).collect();
    let mean = upper.iter().sum::<f64>() / upper.len() as f64;
    let var = upper.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (upper.len() - 1) as f64;
    assert!((mean - s).abs() < 3.0 * (m.var_within / upper.len() as f64).sqrt());
    assert!((var - m.var_within).abs() < 0.005);
}

#[test]
fn within_cluster_x2_variance() {
    let (sigma2, b2, tau) = (1.0, 1.8, 0.7);
    let spec = BiasSpec::new(sigma2, b2, tau).unwrap();
    let rho = rho_fission(&spec);
    let (_, v2) = fission_variances(&spec);
    let n = 1_000_000;
    let x = sample_mvn(&[0.0], &CovMatrix::identity(1), n, Seed(11)).unwrap();
    let pair = gaussian_fission(&x, tau, &ScalePlugin::marginal_cov(CovMatrix::diagonal(&[b2]).unwrap()), Seed(12)).unwrap();
    let m1 = pair.x1.column(0).mean().unwrap();
    let mut groups = [Vec::new(), Vec::new()];
    for (a, b) in pair.x1.column(0).iter().zip(pair.x2.column(0)) {
        groups[usize::from(*a > m1)].push(*b);
    }
    let pooled: f64 = groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / (n - 2) as f64;
    let expected = within_cluster_var_x2(v2, rho);
    assert!((pooled / expected - 1.0).abs() < 0.005, "{pooled} vs {expected}");
    assert!(expected < v2);
}

proptest! {
    #[test]
    fn calibration_anchor(sigma2 in 0.01f64..100.0, tau in 0.05f64..10.0, n in 2usize..5000) {
        let rho = rho_fission(&BiasSpec::new(sigma2, sigma2, tau).unwrap());
        prop_assert_eq!(rho, 0.0);
        prop_assert!((type1_z(rho, n, 0.05).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn noncentral_t_in_unit_interval(x in -50.0f64..50.0, df in 0.5f64..200.0, delta in -10.0f64..10.0) {
        let v = noncentral_t_cdf(x, df, delta).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(noncentral_t_cdf(x + 0.5, df, delta).unwrap() >= v - 1e-12);
    }
}
