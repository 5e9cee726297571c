//! Seeded generation of every distribution the crate uses: multivariate
//! normal, negative binomial, beta-binomial, finite mixtures and
//! equicorrelated negative-binomial vectors.
//!
//! All public samplers are pure functions of their parameters and a
//! [`Seed`]. The `*_with` variants draw from a caller-supplied generator so
//! composite pipelines can share one stream.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lower_mul, CovMatrix};
use crate::rng::Seed;
use crate::theory::dist::{normal_cdf, normal_sf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub cov: CovMatrix,
}

/// Per-variable negative-binomial parameters of one mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbComponent {
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    NegBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "components")]
pub enum Components {
    Gaussian(Vec<GaussianComponent>),
    NegBin(Vec<NbComponent>),
}

/// Generative description of a G-component Gaussian or negative-binomial
/// mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixtureSpec")]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    #[serde(flatten)]
    pub components: Components,
}

#[derive(Deserialize)]
struct RawMixtureSpec {
    weights: Vec<f64>,
    #[serde(flatten)]
    components: Components,
}

impl TryFrom<RawMixtureSpec> for MixtureSpec {
    type Error = Error;
    fn try_from(raw: RawMixtureSpec) -> Result<Self> {
        MixtureSpec::new(raw.weights, raw.components)
    }
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, components: Components) -> Result<Self> {
        let spec = MixtureSpec { weights, components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        MixtureSpec::new(weights, Components::Gaussian(components))
    }

    pub fn negbin(weights: Vec<f64>, components: Vec<NbComponent>) -> Result<Self> {
        MixtureSpec::new(weights, Components::NegBin(components))
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.n_components();
        if g == 0 {
            return Err(Error::Parameter("mixture needs at least one component".into()));
        }
        if self.weights.len() != g {
            return Err(Error::LengthMismatch { left: self.weights.len(), right: g });
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Parameter("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
        }
        let p = self.dim();
        match &self.components {
            Components::Gaussian(cs) => {
                for (g, c) in cs.iter().enumerate() {
                    if c.mean.len() != p || c.cov.dim() != p {
                        return Err(Error::DimMismatch(format!("component {g} does not have dimension {p}")));
                    }
                }
            }
            Components::NegBin(cs) => {
                for (g, c) in cs.iter().enumerate() {
                    if c.mu.len() != p || c.theta.len() != p {
                        return Err(Error::DimMismatch(format!("component {g} does not have dimension {p}")));
                    }
                    if c.mu.iter().chain(&c.theta).any(|v| !(*v > 0.0) || !v.is_finite()) {
                        return Err(Error::Parameter(format!(
                            "component {g}: all mu and theta must be positive and finite"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        match self.components {
            Components::Gaussian(_) => Family::Gaussian,
            Components::NegBin(_) => Family::NegBin,
        }
    }

    pub fn n_components(&self) -> usize {
        match &self.components {
            Components::Gaussian(c) => c.len(),
            Components::NegBin(c) => c.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.components {
            Components::Gaussian(c) => c.first().map_or(0, |c| c.mean.len()),
            Components::NegBin(c) => c.first().map_or(0, |c| c.mu.len()),
        }
    }

    pub fn gaussian_components(&self) -> Option<&[GaussianComponent]> {
        match &self.components {
            Components::Gaussian(c) => Some(c),
            Components::NegBin(_) => None,
        }
    }

    pub fn nb_components(&self) -> Option<&[NbComponent]> {
        match &self.components {
            Components::NegBin(c) => Some(c),
            Components::Gaussian(_) => None,
        }
    }
}

/// Sampled mixture data: real-valued for Gaussian mixtures, counts for
/// negative-binomial ones.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleData {
    Real(Array2<f64>),
    Counts(Array2<u64>),
}

impl SampleData {
    pub fn nrows(&self) -> usize {
        match self {
            SampleData::Real(a) => a.nrows(),
            SampleData::Counts(a) => a.nrows(),
        }
    }

    pub fn as_real(&self) -> Option<&Array2<f64>> {
        match self {
            SampleData::Real(a) => Some(a),
            SampleData::Counts(_) => None,
        }
    }

    pub fn as_counts(&self) -> Option<&Array2<u64>> {
        match self {
            SampleData::Counts(a) => Some(a),
            SampleData::Real(_) => None,
        }
    }
}

/// Data with its latent component labels (0-based: `0..G`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub data: SampleData,
    pub labels: Vec<usize>,
}

// ---------------------------------------------------------------------------
// primitive variates

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform on (0, 1].
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Gamma(shape, scale) by the Marsaglia–Tsang squeeze; shapes below one are
/// boosted through Gamma(a) = Gamma(a + 1) · U^(1/a).
pub fn gamma_with<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    if shape < 1.0 {
        let g = gamma_with(rng, shape + 1.0, scale);
        return g * open_uniform(rng).powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_uniform(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v * scale;
        }
    }
}

pub fn beta_with<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let x = gamma_with(rng, a, 1.0);
    let y = gamma_with(rng, b, 1.0);
    if x + y > 0.0 {
        x / (x + y)
    } else if rng.random::<f64>() < a / (a + b) {
        // both gammas underflowed (tiny shapes): the beta mass sits at the ends
        1.0
    } else {
        0.0
    }
}

pub fn poisson_with<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let d = Poisson::new(lambda).expect("finite positive Poisson rate");
    d.sample(rng) as u64
}

pub fn binomial_with<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// NB(μ, θ) as a Gamma(θ, μ/θ)-mixed Poisson.
pub fn nb_with<R: Rng + ?Sized>(rng: &mut R, mu: f64, theta: f64) -> u64 {
    let lambda = gamma_with(rng, theta, mu / theta);
    poisson_with(rng, lambda)
}

/// BetaBin(x, a, b): p ~ Beta(a, b), then Binomial(x, p).
pub fn betabin_with<R: Rng + ?Sized>(rng: &mut R, x: u64, a: f64, b: f64) -> u64 {
    if x == 0 {
        return 0;
    }
    let p = beta_with(rng, a, b);
    binomial_with(rng, x, p)
}

fn check_nb(mu: f64, theta: f64) -> Result<()> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Parameter(format!("negative binomial mean must be positive, got {mu}")));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::Parameter(format!("overdispersion must be positive, got {theta}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// public samplers

/// `n` i.i.d. rows from N(mean, cov), generated as mean + L z with L the
/// lower Cholesky factor of `cov`.
pub fn sample_mvn(mean: &[f64], cov: &CovMatrix, n: usize, seed: Seed) -> Result<Array2<f64>> {
    sample_mvn_with(&mut seed.rng(), mean, cov, n)
}

pub fn sample_mvn_with<R: Rng + ?Sized>(rng: &mut R, mean: &[f64], cov: &CovMatrix, n: usize) -> Result<Array2<f64>> {
    let p = mean.len();
    if cov.dim() != p {
        return Err(Error::DimMismatch(format!("mean has length {p}, covariance is {0}x{0}", cov.dim())));
    }
    let l = cov.cholesky()?;
    let mut out = Array2::zeros((n, p));
    let mut z = Array1::zeros(p);
    let mut w = vec![0.0; p];
    for mut row in out.rows_mut() {
        z.iter_mut().for_each(|v| *v = standard_normal(rng));
        lower_mul(&l, z.view(), &mut w);
        for j in 0..p {
            row[j] = mean[j] + w[j];
        }
    }
    Ok(out)
}

pub fn sample_nb(mu: f64, theta: f64, n: usize, seed: Seed) -> Result<Vec<u64>> {
    check_nb(mu, theta)?;
    let mut rng = seed.rng();
    Ok((0..n).map(|_| nb_with(&mut rng, mu, theta)).collect())
}

pub fn sample_betabin(x: u64, a: f64, b: f64, seed: Seed) -> Result<u64> {
    if !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Parameter(format!("beta-binomial shapes must be positive, got ({a}, {b})")));
    }
    Ok(betabin_with(&mut seed.rng(), x, a, b))
}

/// Draws labels from the mixing proportions, then each row from its
/// component.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: Seed) -> Result<LabeledSample> {
    sample_mixture_with(&mut seed.rng(), spec, n)
}

pub fn sample_mixture_with<R: Rng + ?Sized>(rng: &mut R, spec: &MixtureSpec, n: usize) -> Result<LabeledSample> {
    spec.validate()?;
    let mut cumulative = Vec::with_capacity(spec.weights.len());
    let mut acc = 0.0;
    for w in &spec.weights {
        acc += w;
        cumulative.push(acc);
    }
    let last_positive = spec.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            cumulative.iter().position(|c| u < *c).unwrap_or(last_positive)
        })
        .collect();

    let p = spec.dim();
    let data = match &spec.components {
        Components::Gaussian(cs) => {
            let factors = cs.iter().map(|c| c.cov.cholesky()).collect::<Result<Vec<_>>>()?;
            let mut x = Array2::zeros((n, p));
            let mut z = Array1::zeros(p);
            let mut w = vec![0.0; p];
            for (i, &g) in labels.iter().enumerate() {
                z.iter_mut().for_each(|v| *v = standard_normal(rng));
                lower_mul(&factors[g], z.view(), &mut w);
                for j in 0..p {
                    x[[i, j]] = cs[g].mean[j] + w[j];
                }
            }
            SampleData::Real(x)
        }
        Components::NegBin(cs) => {
            let mut x = Array2::zeros((n, p));
            for (i, &g) in labels.iter().enumerate() {
                for j in 0..p {
                    x[[i, j]] = nb_with(rng, cs[g].mu[j], cs[g].theta[j]);
                }
            }
            SampleData::Counts(x)
        }
    };
    Ok(LabeledSample { data, labels })
}

/// Lookup table for the NB(μ, θ) quantile function.
#[derive(Debug, Clone)]
pub struct NbQuantileTable {
    cdf: Vec<f64>,
    sf: Vec<f64>,
}

impl NbQuantileTable {
    const MAX_LEN: usize = 10_000_000;

    pub fn new(mu: f64, theta: f64) -> Result<Self> {
        check_nb(mu, theta)?;
        let ratio_limit = mu / (mu + theta);
        let mut pmf = vec![(-theta * (mu / theta).ln_1p()).exp()];
        let mut k = 0usize;
        loop {
            let r = (k as f64 + theta) / (k as f64 + 1.0) * ratio_limit;
            let next = pmf[k] * r;
            pmf.push(next);
            k += 1;
            let tail_bound = if r < 1.0 { next / (1.0 - r) } else { f64::INFINITY };
            if (k as f64 > mu && tail_bound < 1e-18) || pmf.len() >= Self::MAX_LEN {
                break;
            }
        }
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for v in &pmf {
            acc += v;
            cdf.push(acc);
        }
        let mut sf = vec![0.0; pmf.len()];
        let mut tail = 0.0;
        for i in (0..pmf.len()).rev() {
            sf[i] = tail;
            tail += pmf[i];
        }
        Ok(NbQuantileTable { cdf, sf })
    }

    /// Smallest k with F(k) ≥ Φ(z), evaluated on the tail that keeps
    /// precision.
    pub fn quantile_of_normal(&self, z: f64) -> u64 {
        if z <= 0.0 {
            let u = normal_cdf(z);
            self.cdf.partition_point(|c| *c < u) as u64
        } else {
            let s = normal_sf(z);
            let k = self.sf.partition_point(|t| *t > s);
            k.min(self.sf.len() - 1) as u64
        }
    }
}

/// n × p matrix of NB(μ, θ) columns with common pairwise dependence,
/// through a Gaussian copula: equicorrelated normals mapped through Φ and
/// then the NB quantile function.
pub fn sample_correlated_nb(mu: f64, theta: f64, rho: f64, n: usize, p: usize, seed: Seed) -> Result<Array2<u64>> {
    sample_correlated_nb_with(&mut seed.rng(), mu, theta, rho, n, p)
}

pub fn sample_correlated_nb_with<R: Rng + ?Sized>(
    rng: &mut R,
    mu: f64,
    theta: f64,
    rho: f64,
    n: usize,
    p: usize,
) -> Result<Array2<u64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Parameter(format!("correlation must lie in [0, 1), got {rho}")));
    }
    let table = NbQuantileTable::new(mu, theta)?;
    let z = equicorrelated_normals(rng, rho, n, p);
    Ok(z.mapv(|v| table.quantile_of_normal(v)))
}

/// Rows of N(0, R) with R = (1 − ρ) I + ρ 11ᵀ via the one-factor form
/// z_ij = √ρ f_i + √(1−ρ) e_ij.
pub fn equicorrelated_normals<R: Rng + ?Sized>(rng: &mut R, rho: f64, n: usize, p: usize) -> Array2<f64> {
    let a = rho.sqrt();
    let b = (1.0 - rho).sqrt();
    let mut z = Array2::zeros((n, p));
    for mut row in z.rows_mut() {
        let f = standard_normal(rng);
        for v in row.iter_mut() {
            *v = a * f + b * standard_normal(rng);
        }
    }
    z
}
