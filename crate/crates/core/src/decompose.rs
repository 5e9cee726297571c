//! Data fission and data thinning.
//!
//! | method   | X⁽¹⁾                                   | X⁽²⁾           |
//! |----------|-----------------------------------------|----------------|
//! | Gaussian fission | X + τW, W ~ N(0, Σ)             | X − W/τ        |
//! | Gaussian thinning | N(τ₂X, τ₂(1−τ₂)Σ)              | X − X⁽¹⁾       |
//! | Poisson thinning | Binom(X, τ)                      | X − X⁽¹⁾       |
//! | NB thinning | BetaBin(X, τθ, (1−τ)θ)                | X − X⁽¹⁾       |
//!
//! The scale parameter (Σ or θ) comes from a [`ScalePlugin`]: one global
//! value (marginal) or one value per mixture component selected by
//! caller-supplied labels (conditional). This module never estimates
//! labels itself.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{cross_cov, CrossCov};
use crate::linalg::{lower_mul, CovMatrix};
use crate::rng::Seed;
use crate::samplers::{betabin_with, binomial_with, sample_mixture, standard_normal, MixtureSpec};
use crate::theory::mixture_marginal_cov;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PluginMode {
    Marginal,
    Conditional,
}

/// NB overdispersion: a scalar broadcast over variables, or one per
/// variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Theta {
    Scalar(f64),
    PerVariable(Vec<f64>),
}

impl Theta {
    fn get(&self, j: usize) -> f64 {
        match self {
            Theta::Scalar(t) => *t,
            Theta::PerVariable(v) => v[j],
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        let values: &[f64] = match self {
            Theta::Scalar(t) => std::slice::from_ref(t),
            Theta::PerVariable(v) => {
                if v.len() != p {
                    return Err(Error::DimMismatch(format!("{} overdispersion values for {p} variables", v.len())));
                }
                v
            }
        };
        if let Some(t) = values.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::Parameter(format!("overdispersion must be positive and finite, got {t}")));
        }
        Ok(())
    }
}

/// Scale parameter(s) injected into a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePlugin {
    pub mode: PluginMode,
    /// One matrix (marginal) or one per component (conditional).
    pub gaussian_cov: Option<Vec<CovMatrix>>,
    /// One entry (marginal) or one per component (conditional).
    pub nb_theta: Option<Vec<Theta>>,
    /// Component of each row, `0..G`; required in conditional mode.
    pub labels: Option<Vec<usize>>,
}

impl ScalePlugin {
    pub fn marginal_cov(cov: CovMatrix) -> Self {
        ScalePlugin { mode: PluginMode::Marginal, gaussian_cov: Some(vec![cov]), nb_theta: None, labels: None }
    }

    pub fn conditional_cov(covs: Vec<CovMatrix>, labels: Vec<usize>) -> Self {
        ScalePlugin { mode: PluginMode::Conditional, gaussian_cov: Some(covs), nb_theta: None, labels: Some(labels) }
    }

    pub fn marginal_theta(theta: Theta) -> Self {
        ScalePlugin { mode: PluginMode::Marginal, gaussian_cov: None, nb_theta: Some(vec![theta]), labels: None }
    }

    pub fn conditional_theta(thetas: Vec<Theta>, labels: Vec<usize>) -> Self {
        ScalePlugin { mode: PluginMode::Conditional, gaussian_cov: None, nb_theta: Some(thetas), labels: Some(labels) }
    }

    /// Index into the parameter list for every row.
    fn row_index(&self, n: usize, n_params: usize) -> Result<Vec<usize>> {
        match self.mode {
            PluginMode::Marginal => {
                if n_params != 1 {
                    return Err(Error::Parameter(format!(
                        "marginal plugin needs exactly one scale parameter, got {n_params}"
                    )));
                }
                Ok(vec![0; n])
            }
            PluginMode::Conditional => {
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Label("conditional plugin requires labels".into()))?;
                if labels.len() != n {
                    return Err(Error::Label(format!("{} labels for {n} rows", labels.len())));
                }
                if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= n_params) {
                    return Err(Error::Label(format!(
                        "label {} of row {} has no scale parameter ({n_params} given)",
                        l + 1,
                        i + 1
                    )));
                }
                Ok(labels.clone())
            }
        }
    }

    fn covs(&self, p: usize) -> Result<&[CovMatrix]> {
        let covs = self
            .gaussian_cov
            .as_deref()
            .ok_or_else(|| Error::Parameter("plugin has no covariance".into()))?;
        if let Some(c) = covs.iter().find(|c| c.dim() != p) {
            return Err(Error::DimMismatch(format!("{0}x{0} plugin covariance for {p} variables", c.dim())));
        }
        Ok(covs)
    }

    fn thetas(&self, p: usize) -> Result<&[Theta]> {
        let thetas = self
            .nb_theta
            .as_deref()
            .ok_or_else(|| Error::Parameter("plugin has no overdispersion".into()))?;
        for t in thetas {
            t.validate(p)?;
        }
        Ok(thetas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    GaussFission,
    GaussThin,
    PoissonThin,
    NBThin,
}

/// The two parts of a decomposed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FissionPair<T> {
    pub x1: Array2<T>,
    pub x2: Array2<T>,
    pub tau: f64,
    pub method: Method,
    pub plugin_mode: PluginMode,
}

/// X⁽¹⁾ = X + τW, X⁽²⁾ = X − W/τ with W_i ~ N(0, Σ_plugin(i)).
pub fn gaussian_fission(x: &Array2<f64>, tau: f64, plugin: &ScalePlugin, seed: Seed) -> Result<FissionPair<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("fission tau must be positive, got {tau}")));
    }
    let noise = gaussian_noise(x, plugin, seed)?;
    Ok(FissionPair {
        x1: x + &(&noise * tau),
        x2: x - &(&noise / tau),
        tau,
        method: Method::GaussFission,
        plugin_mode: plugin.mode,
    })
}

/// X⁽¹⁾ | X ~ N(τ₂X, τ₂(1−τ₂)Σ_plugin), X⁽²⁾ = X − X⁽¹⁾.
pub fn gaussian_thin(x: &Array2<f64>, tau2: f64, plugin: &ScalePlugin, seed: Seed) -> Result<FissionPair<f64>> {
    if !(tau2 > 0.0 && tau2 < 1.0) {
        return Err(Error::Parameter(format!("thinning tau must lie in (0, 1), got {tau2}")));
    }
    let noise = gaussian_noise(x, plugin, seed)?;
    let x1 = x * tau2 + &noise * (tau2 * (1.0 - tau2)).sqrt();
    let x2 = x - &x1;
    Ok(FissionPair { x1, x2, tau: tau2, method: Method::GaussThin, plugin_mode: plugin.mode })
}

/// Row i: L_g z_i with L_g the Cholesky factor of the row's plugin matrix.
fn gaussian_noise(x: &Array2<f64>, plugin: &ScalePlugin, seed: Seed) -> Result<Array2<f64>> {
    let (n, p) = x.dim();
    let covs = plugin.covs(p)?;
    let index = plugin.row_index(n, covs.len())?;
    let factors = covs.iter().map(CovMatrix::cholesky).collect::<Result<Vec<_>>>()?;
    let mut rng = seed.rng();
    let mut out = Array2::zeros((n, p));
    let mut z = Array1::zeros(p);
    let mut w = vec![0.0; p];
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        z.iter_mut().for_each(|v| *v = standard_normal(&mut rng));
        lower_mul(&factors[index[i]], z.view(), &mut w);
        row.iter_mut().zip(&w).for_each(|(r, v)| *r = *v);
    }
    Ok(out)
}

/// Entrywise X⁽¹⁾ ~ Binom(X, τ), τ ∈ [0, 1].
pub fn poisson_thin(x: &Array2<u64>, tau: f64, seed: Seed) -> Result<FissionPair<u64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!("Poisson thinning tau must lie in [0, 1], got {tau}")));
    }
    let mut rng = seed.rng();
    let x1 = x.mapv(|v| binomial_with(&mut rng, v, tau));
    let x2 = x - &x1;
    Ok(FissionPair { x1, x2, tau, method: Method::PoissonThin, plugin_mode: PluginMode::Marginal })
}

/// Entrywise X⁽¹⁾ ~ BetaBin(X, τθ, (1−τ)θ), τ ∈ (0, 1), with θ taken from
/// the plugin for the entry's variable and (conditionally) its row label.
pub fn nb_thin(x: &Array2<u64>, tau: f64, plugin: &ScalePlugin, seed: Seed) -> Result<FissionPair<u64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!("NB thinning tau must lie in (0, 1), got {tau}")));
    }
    let (n, p) = x.dim();
    let thetas = plugin.thetas(p)?;
    let index = plugin.row_index(n, thetas.len())?;
    let mut rng = seed.rng();
    let mut x1 = Array2::zeros((n, p));
    for ((i, j), v) in x.indexed_iter() {
        let theta = thetas[index[i]].get(j);
        x1[[i, j]] = betabin_with(&mut rng, *v, tau * theta, (1.0 - tau) * theta);
    }
    let x2 = x - &x1;
    Ok(FissionPair { x1, x2, tau, method: Method::NBThin, plugin_mode: plugin.mode })
}

/// Converts signed input to counts, rejecting negative entries.
pub fn checked_counts(x: &Array2<i64>) -> Result<Array2<u64>> {
    if let Some(((row, col), &value)) = x.indexed_iter().find(|(_, v)| **v < 0) {
        return Err(Error::NegativeCount { row, col, value });
    }
    Ok(x.mapv(|v| v as u64))
}

/// Cross-covariances of fissioned parts, overall and per true component.
#[derive(Debug, Clone, PartialEq)]
pub struct CovCheck {
    pub overall: CrossCov,
    pub within: Vec<CrossCov>,
    pub labels: Vec<usize>,
}

/// Samples the Gaussian mixture, fissions it with the true scale parameter
/// (per-component Σ_g when `mode` is conditional, the mixture's marginal
/// covariance otherwise) and measures Cov(X⁽¹⁾, X⁽²⁾).
pub fn gaussian_fission_conditional_covcheck(
    spec: &MixtureSpec,
    tau: f64,
    n: usize,
    seed: Seed,
    mode: PluginMode,
) -> Result<CovCheck> {
    let comps = spec
        .gaussian_components()
        .ok_or_else(|| Error::Parameter("covariance check needs a Gaussian mixture".into()))?;
    let sample = sample_mixture(spec, n, seed.derive_tag("sample"))?;
    let x = sample.data.as_real().expect("Gaussian mixture gives real data");
    let plugin = match mode {
        PluginMode::Conditional => {
            ScalePlugin::conditional_cov(comps.iter().map(|c| c.cov.clone()).collect(), sample.labels.clone())
        }
        PluginMode::Marginal => ScalePlugin::marginal_cov(mixture_marginal_cov(spec)?),
    };
    let pair = gaussian_fission(x, tau, &plugin, seed.derive_tag("fission"))?;
    let overall = cross_cov(pair.x1.view(), pair.x2.view())?;
    let mut within = Vec::with_capacity(comps.len());
    for g in 0..comps.len() {
        let rows: Vec<usize> = (0..n).filter(|&i| sample.labels[i] == g).collect();
        let a = pair.x1.select(ndarray::Axis(0), &rows);
        let b = pair.x2.select(ndarray::Axis(0), &rows);
        within.push(cross_cov(a.view(), b.view())?);
    }
    Ok(CovCheck { overall, within, labels: sample.labels })
}
