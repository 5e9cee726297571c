use fissionlab::estimate::{empirical_cov, Denominator};
use fissionlab::samplers::{
    betabin_with, sample_betabin, sample_correlated_nb, sample_mixture, sample_mvn, sample_nb, NbComponent,
};
use fissionlab::{CovMatrix, GaussianComponent, MixtureSpec, Seed};
use ndarray::Array2;
use proptest::prelude::*;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete, NegativeBinomial};

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
    c / (va * vb).sqrt()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    fissionlab::stattest::mid_ranks(x).0
}

/// Pearson chi-square p-value of observed counts against expected counts,
/// pooling cells with expectation below 5 into their neighbours.
fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (a, b) in observed.iter().zip(expected) {
        o += a;
        e += b;
        if e >= 5.0 {
            obs.push(o);
            exp.push(e);
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        *obs.last_mut().unwrap() += o;
        *exp.last_mut().unwrap() += e;
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    ChiSquared::new((obs.len() - 1) as f64).unwrap().sf(stat)
}

#[test]
fn zero_covariance_gives_constant_rows() {
    let x = sample_mvn(&[3.0, -1.0], &CovMatrix::zeros(2), 5, Seed(1)).unwrap();
    for row in x.rows() {
        assert_eq!(row.to_vec(), vec![3.0, -1.0]);
    }
}

#[test]
fn mvn_recovers_identity_covariance() {
    let x = sample_mvn(&[0.0, 0.0], &CovMatrix::identity(2), 100_000, Seed(2)).unwrap();
    let s = empirical_cov(x.view(), Denominator::NMinus1).unwrap();
    let eye = Array2::<f64>::eye(2);
    for (a, b) in s.as_array().iter().zip(eye.iter()) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
}

#[test]
fn mvn_equicorrelated_off_diagonal() {
    let x = sample_mvn(&[0.0; 50], &CovMatrix::equicorrelated(50, 0.9), 10_000, Seed(3)).unwrap();
    let cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..50 {
        for j in i + 1..50 {
            sum += pearson(&cols[i], &cols[j]);
            count += 1.0;
        }
    }
    let r = sum / count;
    assert!((0.88..=0.92).contains(&r), "{r}");
}

#[test]
fn nb_moments() {
    let x: Vec<f64> = sample_nb(5.0, 5.0, 100_000, Seed(4)).unwrap().into_iter().map(|v| v as f64).collect();
    let (m, v) = mean_var(&x);
    assert!((4.97..=5.03).contains(&m), "{m}");
    assert!((9.7..=10.3).contains(&v), "{v}");
    assert!(sample_nb(5.0, 5.0, 0, Seed(4)).unwrap().is_empty());
}

#[test]
fn nb_poisson_limit() {
    let x: Vec<f64> = sample_nb(5.0, 1e8, 100_000, Seed(5)).unwrap().into_iter().map(|v| v as f64).collect();
    let (m, v) = mean_var(&x);
    assert!((0.99..=1.01).contains(&(v / m)), "{}", v / m);
}

#[test]
fn nb_matches_pmf() {
    let (mu, theta) = (5.0, 2.0);
    let x = sample_nb(mu, theta, 50_000, Seed(6)).unwrap();
    let nb = NegativeBinomial::new(theta, theta / (theta + mu)).unwrap();
    let max = 80;
    let mut observed = vec![0.0; max + 1];
    for v in x {
        observed[(v as usize).min(max)] += 1.0;
    }
    let mut expected: Vec<f64> = (0..max).map(|k| nb.pmf(k as u64) * 50_000.0).collect();
    expected.push(50_000.0 - expected.iter().sum::<f64>());
    assert!(chi_square_p(&observed, &expected) > 0.001);
}

#[test]
fn betabin_examples() {
    assert_eq!(sample_betabin(0, 2.0, 3.0, Seed(0)).unwrap(), 0);
    let mut rng = Seed(7).rng();
    let draws: Vec<f64> = (0..100_000).map(|_| betabin_with(&mut rng, 20, 5.0, 5.0) as f64).collect();
    let (m, _) = mean_var(&draws);
    assert!((9.9..=10.1).contains(&m), "{m}");
}

#[test]
fn betabin_large_concentration_is_binomial() {
    let mut rng = Seed(8).rng();
    let mut observed = vec![0.0; 21];
    for _ in 0..100_000 {
        observed[betabin_with(&mut rng, 20, 1e6, 1e6) as usize] += 1.0;
    }
    let b = Binomial::new(0.5, 20).unwrap();
    let expected: Vec<f64> = (0..=20).map(|k| b.pmf(k) * 100_000.0).collect();
    assert!(chi_square_p(&observed, &expected) > 0.001);
}

fn gaussian(mean: &[f64], var: f64) -> GaussianComponent {
    GaussianComponent { mean: mean.to_vec(), cov: CovMatrix::identity(mean.len()).scaled(var) }
}

#[test]
fn mixture_label_frequencies() {
    let spec = MixtureSpec::gaussian(
        vec![0.2, 0.3, 0.5],
        vec![gaussian(&[-4.0, 0.0], 1.0), gaussian(&[0.0, 3.0], 2.0), gaussian(&[5.0, 5.0], 0.5)],
    )
    .unwrap();
    let n = 100_000;
    let s = sample_mixture(&spec, n, Seed(9)).unwrap();
    let mut counts = vec![0.0; 3];
    s.labels.iter().for_each(|&l| counts[l] += 1.0);
    let expected: Vec<f64> = spec.weights.iter().map(|w| w * n as f64).collect();
    assert!(chi_square_p(&counts, &expected) > 0.001);

    let x = s.data.as_real().unwrap();
    for (g, comp) in spec.gaussian_components().unwrap().iter().enumerate() {
        for j in 0..2 {
            let v: Vec<f64> = (0..n).filter(|&i| s.labels[i] == g).map(|i| x[[i, j]]).collect();
            let (m, var) = mean_var(&v);
            let se = (var / v.len() as f64).sqrt();
            assert!((m - comp.mean[j]).abs() < 3.0 * se, "component {g} variable {j}: {m}");
        }
    }
}

#[test]
fn single_component_mixture_matches_component() {
    let spec = MixtureSpec::negbin(vec![1.0], vec![NbComponent { mu: vec![5.0], theta: vec![5.0] }]).unwrap();
    let s = sample_mixture(&spec, 100_000, Seed(10)).unwrap();
    assert!(s.labels.iter().all(|&l| l == 0));
    let x: Vec<f64> = s.data.as_counts().unwrap().iter().map(|&v| v as f64).collect();
    let (m, v) = mean_var(&x);
    assert!((4.97..=5.03).contains(&m) && (9.7..=10.3).contains(&v));
}

#[test]
fn nb_mixture_generator() {
    let spec = MixtureSpec::negbin(
        vec![0.5, 0.5],
        vec![NbComponent { mu: vec![5.0], theta: vec![5.0] }, NbComponent { mu: vec![60.0], theta: vec![40.0] }],
    )
    .unwrap();
    let s = sample_mixture(&spec, 100, Seed(11)).unwrap();
    let x = s.data.as_counts().unwrap();
    assert_eq!(x.dim(), (100, 1));
    let mean_of = |g| {
        let v: Vec<f64> = (0..100).filter(|&i| s.labels[i] == g).map(|i| x[[i, 0]] as f64).collect();
        mean_var(&v).0
    };
    assert!(mean_of(0) < 15.0 && mean_of(1) > 40.0);
}

#[test]
fn correlated_nb_independent_at_zero() {
    let n = 10_000;
    let x = sample_correlated_nb(5.0, 10.0, 0.0, n, 5, Seed(12)).unwrap();
    let cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let bound = 3.0 / (n as f64).sqrt();
    for i in 0..5 {
        for j in i + 1..5 {
            assert!(pearson(&cols[i], &cols[j]).abs() < bound);
        }
    }
}

fn mean_spearman(x: &Array2<u64>) -> f64 {
    let cols: Vec<Vec<f64>> =
        x.columns().into_iter().map(|c| ranks(&c.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            sum += pearson(&cols[i], &cols[j]);
            count += 1.0;
        }
    }
    sum / count
}

#[test]
fn correlated_nb_dependence_increases_with_rho() {
    let lo = sample_correlated_nb(5.0, 10.0, 0.5, 1000, 50, Seed(13)).unwrap();
    let hi = sample_correlated_nb(5.0, 10.0, 0.9, 1000, 50, Seed(13)).unwrap();
    assert!(mean_spearman(&hi) > mean_spearman(&lo));
}

#[test]
fn correlated_nb_keeps_marginals() {
    let (mu, theta, n) = (5.0, 10.0, 10_000);
    let x = sample_correlated_nb(mu, theta, 0.9, n, 50, Seed(14)).unwrap();
    let nb = NegativeBinomial::new(theta, theta / (theta + mu)).unwrap();
    let max = 40;
    let mut observed = vec![0.0; max + 1];
    for &v in x.column(0) {
        observed[(v as usize).min(max)] += 1.0;
    }
    let mut expected: Vec<f64> = (0..max).map(|k| nb.pmf(k as u64) * n as f64).collect();
    expected.push(n as f64 - expected.iter().sum::<f64>());
    assert!(chi_square_p(&observed, &expected) > 0.001);
}

#[test]
fn correlated_nb_rejects_bad_rho() {
    assert!(sample_correlated_nb(5.0, 10.0, 1.0, 10, 2, Seed(0)).is_err());
    assert!(sample_correlated_nb(5.0, 10.0, -0.1, 10, 2, Seed(0)).is_err());
}

#[test]
fn samplers_are_deterministic() {
    let spec = MixtureSpec::gaussian(vec![0.5, 0.5], vec![gaussian(&[0.0], 1.0), gaussian(&[3.0], 2.0)]).unwrap();
    assert_eq!(sample_mixture(&spec, 500, Seed(15)).unwrap(), sample_mixture(&spec, 500, Seed(15)).unwrap());
    assert_ne!(sample_mixture(&spec, 500, Seed(15)).unwrap(), sample_mixture(&spec, 500, Seed(16)).unwrap());
    assert_eq!(
        sample_correlated_nb(5.0, 10.0, 0.6, 200, 10, Seed(17)).unwrap(),
        sample_correlated_nb(5.0, 10.0, 0.6, 200, 10, Seed(17)).unwrap()
    );
    let par = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = par.install(|| sample_nb(3.0, 1.5, 1000, Seed(18)).unwrap());
    assert_eq!(a, sample_nb(3.0, 1.5, 1000, Seed(18)).unwrap());
}

#[test]
fn mixture_spec_rejects_bad_input() {
    assert!(MixtureSpec::gaussian(vec![0.6, 0.6], vec![gaussian(&[0.0], 1.0), gaussian(&[1.0], 1.0)]).is_err());
    assert!(MixtureSpec::gaussian(vec![1.0], vec![]).is_err());
    assert!(MixtureSpec::negbin(vec![1.0], vec![NbComponent { mu: vec![5.0], theta: vec![0.0] }]).is_err());
    let json = r#"{"weights":[0.5,0.4],"family":"NegBin","components":[{"mu":[1],"theta":[1]},{"mu":[2],"theta":[2]}]}"#;
    assert!(serde_json::from_str::<MixtureSpec>(json).is_err());
}

proptest! {
    #[test]
    fn betabin_stays_in_range(x in 0u64..500, a in 0.01f64..50.0, b in 0.01f64..50.0, seed in any::<u64>()) {
        let v = sample_betabin(x, a, b, Seed(seed)).unwrap();
        prop_assert!(v <= x);
    }

    #[test]
    fn nb_draws_deterministic(mu in 0.1f64..100.0, theta in 0.05f64..100.0, seed in any::<u64>()) {
        prop_assert_eq!(sample_nb(mu, theta, 20, Seed(seed)).unwrap(), sample_nb(mu, theta, 20, Seed(seed)).unwrap());
    }
}
