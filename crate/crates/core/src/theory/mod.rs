//! Closed-form covariance identities for fission and thinning, and the
//! Type I error approximation for testing after a two-cluster split of
//! fissioned Gaussian data.
//!
//! Assumptions behind [`type1_z`] and [`type1_t`]: the n observations are
//! split into two equal clusters exactly at the mean of X⁽¹⁾, and the test
//! is the pooled two-sample t-test on X⁽²⁾. The harness reports the
//! realized cluster-size imbalance so departures can be inspected.

pub mod dist;

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CovMatrix;
use crate::samplers::{Components, MixtureSpec};

use dist::{noncentral_t_cdf, normal_cdf, normal_quantile, normal_sf, t_quantile};

/// True variance σ², plugin variance b² and fission parameter τ for a
/// univariate Gaussian fission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub sigma2: f64,
    pub b2: f64,
    pub tau: f64,
}

impl BiasSpec {
    pub fn new(sigma2: f64, b2: f64, tau: f64) -> Result<Self> {
        for (name, v) in [("sigma2", sigma2), ("b2", b2), ("tau", tau)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(BiasSpec { sigma2, b2, tau })
    }

    /// Plugin b² = σ²(1 + bias).
    pub fn from_relative_bias(sigma2: f64, bias: f64, tau: f64) -> Result<Self> {
        BiasSpec::new(sigma2, sigma2 * (1.0 + bias), tau)
    }

    /// (b² − σ²) / σ².
    pub fn relative_bias(&self) -> f64 {
        (self.b2 - self.sigma2) / self.sigma2
    }
}

/// Cor(X⁽¹⁾, X⁽²⁾) = (σ² − b²) / √((σ² + τ²b²)(σ² + b²/τ²)).
pub fn rho_fission(spec: &BiasSpec) -> f64 {
    let BiasSpec { sigma2, b2, tau } = *spec;
    let t2 = tau * tau;
    (sigma2 - b2) / ((sigma2 + t2 * b2) * (sigma2 + b2 / t2)).sqrt()
}

fn noncentrality(rho: f64, n: usize) -> Result<f64> {
    let r2 = rho * rho;
    if !rho.is_finite() || r2 >= FRAC_PI_2 {
        return Err(Error::Domain(format!("rho^2 = {r2} is not below pi/2")));
    }
    Ok(rho * (n as f64).sqrt() / (FRAC_PI_2 - r2).sqrt())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Type I error of the two-sided level-α test when the statistic is
/// N(δ, 1), δ = ρ√n / √(π/2 − ρ²): 1 − F(q) + F(−q).
pub fn type1_z(rho: f64, n: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if n < 2 {
        return Err(Error::InsufficientData(format!("need n >= 2, got {n}")));
    }
    let delta = noncentrality(rho, n)?;
    let q = normal_quantile(1.0 - alpha / 2.0);
    Ok(normal_sf(q - delta) + normal_cdf(-q - delta))
}

/// As [`type1_z`] with F the noncentral t(n − 2, δ) CDF and q the
/// Student-t(n − 2) quantile.
pub fn type1_t(rho: f64, n: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if n < 3 {
        return Err(Error::InsufficientData(format!("need n >= 3, got {n}")));
    }
    let delta = noncentrality(rho, n)?;
    let df = (n - 2) as f64;
    let q = t_quantile(1.0 - alpha / 2.0, df);
    let upper = 1.0 - noncentral_t_cdf(q, df, delta)?;
    let lower = noncentral_t_cdf(-q, df, delta)?;
    Ok((upper + lower).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Type1Variant {
    Z,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Type1Curve {
    /// (relative bias, Type I error) pairs.
    pub grid: Vec<(f64, f64)>,
    pub n: usize,
    pub alpha: f64,
    pub variant: Type1Variant,
}

/// Type I error over a relative-bias grid at fixed σ², τ and n.
pub fn type1_curve(
    sigma2: f64,
    tau: f64,
    biases: &[f64],
    n: usize,
    alpha: f64,
    variant: Type1Variant,
) -> Result<Type1Curve> {
    let grid = biases
        .iter()
        .map(|&bias| {
            let rho = rho_fission(&BiasSpec::from_relative_bias(sigma2, bias, tau)?);
            let a = match variant {
                Type1Variant::Z => type1_z(rho, n, alpha)?,
                Type1Variant::StudentT => type1_t(rho, n, alpha)?,
            };
            Ok((bias, a))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Type1Curve { grid, n, alpha, variant })
}

fn gaussian_parts(spec: &MixtureSpec) -> Result<&[crate::samplers::GaussianComponent]> {
    match &spec.components {
        Components::Gaussian(c) => Ok(c),
        Components::NegBin(_) => Err(Error::Parameter("a Gaussian mixture is required".into())),
    }
}

/// Mixture mean μ̄ = Σ π_g μ_g.
pub fn mixture_mean(spec: &MixtureSpec) -> Result<Vec<f64>> {
    let comps = gaussian_parts(spec)?;
    let p = spec.dim();
    let mut m = vec![0.0; p];
    for (w, c) in spec.weights.iter().zip(comps) {
        for j in 0..p {
            m[j] += w * c.mean[j];
        }
    }
    Ok(m)
}

/// Σ_g π_g (μ_g − μ̄)(μ_g − μ̄)ᵀ: the overall cross-covariance left by
/// conditional fission, i.e. the covariance of the component means.
pub fn cov_conditional_fission(spec: &MixtureSpec) -> Result<CovMatrix> {
    let comps = gaussian_parts(spec)?;
    let p = spec.dim();
    let mbar = mixture_mean(spec)?;
    let mut out = Array2::zeros((p, p));
    for (w, c) in spec.weights.iter().zip(comps) {
        for i in 0..p {
            for j in 0..p {
                out[[i, j]] += w * (c.mean[i] - mbar[i]) * (c.mean[j] - mbar[j]);
            }
        }
    }
    CovMatrix::symmetrized(out)
}

/// Marginal covariance of the mixture: Σ_g π_g Σ_g plus the covariance of
/// the component means.
pub fn mixture_marginal_cov(spec: &MixtureSpec) -> Result<CovMatrix> {
    let comps = gaussian_parts(spec)?;
    let between = cov_conditional_fission(spec)?.into_array();
    let mut out = between;
    for (w, c) in spec.weights.iter().zip(comps) {
        out = out + c.cov.as_array() * *w;
    }
    CovMatrix::symmetrized(out)
}

/// Σ_g − Σ: within-component cross-covariance under marginal fission.
pub fn cov_marginal_fission_conditional(sigma_g: &CovMatrix, sigma: &CovMatrix) -> Result<CovMatrix> {
    difference(sigma_g, sigma)
}

/// Σ − Σ̂: cross-covariance of fissioned parts when Σ̂ is plugged in for Σ.
pub fn cov_prop1(sigma: &CovMatrix, sigma_hat: &CovMatrix) -> Result<CovMatrix> {
    difference(sigma, sigma_hat)
}

fn difference(a: &CovMatrix, b: &CovMatrix) -> Result<CovMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!("{0}x{0} vs {1}x{1}", a.dim(), b.dim())));
    }
    CovMatrix::symmetrized(a.as_array() - b.as_array())
}

/// Cov(X⁽¹⁾, X⁽²⁾) = τ(1−τ)(μ²/θ)(1 − (θ+1)/(θ̂+1)) for NB thinning with
/// plugin θ̂.
pub fn cov_nb_thin(mu: f64, theta: f64, theta_hat: f64, tau: f64) -> Result<f64> {
    for (name, v) in [("mu", mu), ("theta", theta), ("theta_hat", theta_hat)] {
        if !(v > 0.0) {
            return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
        }
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(tau * (1.0 - tau) * (mu * mu / theta) * (1.0 - (theta + 1.0) / (theta_hat + 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfNormalMoments {
    pub mean_upper: f64,
    pub mean_lower: f64,
    pub var_within: f64,
}

/// Moments of N(μ, σ²) restricted to either side of μ.
pub fn halfnormal_cluster_moments(mu: f64, sigma2: f64) -> Result<HalfNormalMoments> {
    if !(sigma2 > 0.0) {
        return Err(Error::Parameter(format!("variance must be positive, got {sigma2}")));
    }
    let shift = (2.0 * sigma2 / PI).sqrt();
    Ok(HalfNormalMoments {
        mean_upper: mu + shift,
        mean_lower: mu - shift,
        var_within: (1.0 - 2.0 / PI) * sigma2,
    })
}

/// Within-cluster variance of X⁽²⁾ after splitting on the sign of
/// X⁽¹⁾ − μ: σ²_{X⁽²⁾}(1 − (2/π)ρ²).
pub fn within_cluster_var_x2(sigma2_x2: f64, rho: f64) -> f64 {
    sigma2_x2 * (1.0 - 2.0 / PI * rho * rho)
}

/// Var(X⁽¹⁾) = σ² + τ²b² and Var(X⁽²⁾) = σ² + b²/τ².
pub fn fission_variances(spec: &BiasSpec) -> (f64, f64) {
    let t2 = spec.tau * spec.tau;
    (spec.sigma2 + t2 * spec.b2, spec.sigma2 + spec.b2 / t2)
}

/// One row of the conditional-versus-marginal comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceTableRow {
    pub mode: String,
    pub scope: String,
    pub covariance: CovMatrix,
}

/// Cross-covariances of the fissioned parts under conditional and marginal
/// fission, overall and within each component.
pub fn fission_covariance_table(spec: &MixtureSpec) -> Result<Vec<CovarianceTableRow>> {
    let comps = gaussian_parts(spec)?;
    let p = spec.dim();
    let marginal = mixture_marginal_cov(spec)?;
    let mut rows = vec![CovarianceTableRow {
        mode: "conditional".into(),
        scope: "overall".into(),
        covariance: cov_conditional_fission(spec)?,
    }];
    for g in 0..comps.len() {
        rows.push(CovarianceTableRow {
            mode: "conditional".into(),
            scope: format!("component {}", g + 1),
            covariance: CovMatrix::zeros(p),
        });
    }
    rows.push(CovarianceTableRow {
        mode: "marginal".into(),
        scope: "overall".into(),
        covariance: CovMatrix::zeros(p),
    });
    for (g, c) in comps.iter().enumerate() {
        rows.push(CovarianceTableRow {
            mode: "marginal".into(),
            scope: format!("component {}", g + 1),
            covariance: cov_marginal_fission_conditional(&c.cov, &marginal)?,
        });
    }
    Ok(rows)
}
