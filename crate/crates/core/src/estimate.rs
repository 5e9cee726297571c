//! Scale-parameter estimation: empirical covariance, the negative-binomial
//! overdispersion MLE, their per-component versions, and sample
//! cross-covariances with standard errors.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CovMatrix;
use crate::samplers::SampleData;
use crate::special::ln_gamma;

/// Largest overdispersion reported; stands in for the Poisson limit.
pub const THETA_CAP: f64 = 1e6;
pub const THETA_FLOOR: f64 = 1e-3;
/// Tolerance on log θ for the 1-D maximization.
pub const LOG_THETA_TOL: f64 = 1e-8;
const COARSE_GRID: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Denominator {
    N,
    NMinus1,
}

/// Sample covariance of the rows of `x`.
pub fn empirical_cov(x: ArrayView2<f64>, denominator: Denominator) -> Result<CovMatrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mean;
    let d = match denominator {
        Denominator::N => n as f64,
        Denominator::NMinus1 => (n - 1) as f64,
    };
    CovMatrix::symmetrized(centered.t().dot(&centered) / d)
}

/// Sample cross-covariance matrix between the columns of `a` and `b` with
/// entrywise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCov {
    /// `estimate[[i, j]]` estimates Cov(a_i, b_j).
    pub estimate: Array2<f64>,
    /// Standard deviation of the centered products over √n.
    pub se: Array2<f64>,
    pub n: usize,
}

impl CrossCov {
    /// Largest |estimate − reference| / se over all entries.
    pub fn max_z(&self, reference: &Array2<f64>) -> f64 {
        self.estimate
            .iter()
            .zip(&self.se)
            .zip(reference)
            .map(|((e, s), r)| if *s > 0.0 { (e - r).abs() / s } else if e == r { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

pub fn cross_cov(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<CrossCov> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::LengthMismatch { left: n, right: b.nrows() });
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("cross-covariance needs at least 2 rows, got {n}")));
    }
    let ca = &a - &a.mean_axis(Axis(0)).expect("nonempty");
    let cb = &b - &b.mean_axis(Axis(0)).expect("nonempty");
    let (pa, pb) = (a.ncols(), b.ncols());
    let mut estimate = Array2::zeros((pa, pb));
    let mut se = Array2::zeros((pa, pb));
    for i in 0..pa {
        for j in 0..pb {
            let (m, v) = mean_var(ca.column(i).iter().zip(cb.column(j)).map(|(u, w)| u * w), n);
            estimate[[i, j]] = m * n as f64 / (n - 1) as f64;
            se[[i, j]] = (v / n as f64).sqrt();
        }
    }
    Ok(CrossCov { estimate, se, n })
}

/// Mean and (n − 1)-denominator variance in one pass (Welford).
fn mean_var(values: impl Iterator<Item = f64>, n: usize) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, v) in values.enumerate() {
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    (mean, if n > 1 { m2 / (n - 1) as f64 } else { 0.0 })
}

/// Negative-binomial fit with μ̂ fixed at the sample mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbFit {
    pub mu_hat: f64,
    pub theta_hat: f64,
    pub loglik: f64,
    /// False when θ̂ sits on a boundary of the search range, including the
    /// equi- or underdispersed case reported as [`THETA_CAP`].
    pub converged: bool,
    pub iterations: usize,
}

/// Profile log-likelihood of an NB(μ, θ) sample with fixed μ, written as
/// Σ_j c_j ln(θ + j) + nθ ln θ − (nθ + S) ln(θ + μ) + S ln μ − Σ ln x_i!
/// with c_j = #{i : x_i > j}, rearranged so large θ loses no precision.
#[derive(Debug, Clone)]
pub struct NbLikelihood {
    exceed: Vec<f64>,
    n: f64,
    sum: f64,
    mu: f64,
    constant: f64,
}

impl NbLikelihood {
    pub fn new(x: &[u64], mu: f64) -> Self {
        let max = x.iter().copied().max().unwrap_or(0) as usize;
        let mut hist = vec![0u64; max + 1];
        for &v in x {
            hist[v as usize] += 1;
        }
        let mut exceed = vec![0.0; max];
        let mut above = x.len() as u64;
        for j in 0..max {
            above -= hist[j];
            exceed[j] = above as f64;
        }
        let sum: f64 = x.iter().map(|&v| v as f64).sum();
        let ln_fact: f64 = hist
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(v, c)| *c as f64 * ln_gamma(v as f64 + 1.0))
            .sum();
        let constant = if sum > 0.0 { sum * mu.ln() } else { 0.0 } - ln_fact;
        NbLikelihood { exceed, n: x.len() as f64, sum, mu, constant }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let denom = theta + self.mu;
        let mut s = 0.0;
        for (j, c) in self.exceed.iter().enumerate() {
            s += c * ((j as f64 - self.mu) / denom).ln_1p();
        }
        debug_assert!(self.sum >= 0.0);
        s - self.n * theta * (self.mu / theta).ln_1p() + self.constant
    }
}

/// Overdispersion MLE by coarse scan then golden-section search on log θ
/// over [ln 1e-3, ln 1e6].
///
/// Samples whose variance (denominator n) does not exceed their mean have
/// no finite maximizer; they get θ̂ = [`THETA_CAP`] with `converged = false`.
pub fn nb_mle(x: &[u64]) -> Result<NbFit> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("NB fit needs at least 2 observations, got {n}")));
    }
    let sum: f64 = x.iter().map(|&v| v as f64).sum();
    if sum == 0.0 {
        return Err(Error::DegenerateData("all counts are zero, mean is 0".into()));
    }
    let mu = sum / n as f64;
    let var_n = x.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n as f64;
    let lik = NbLikelihood::new(x, mu);
    if var_n <= mu {
        return Ok(NbFit { mu_hat: mu, theta_hat: THETA_CAP, loglik: lik.eval(THETA_CAP), converged: false, iterations: 0 });
    }

    let (lo, hi) = (THETA_FLOOR.ln(), THETA_CAP.ln());
    let f = |u: f64| lik.eval(u.exp());
    let step = (hi - lo) / (COARSE_GRID - 1) as f64;
    let grid: Vec<f64> = (0..COARSE_GRID).map(|i| f(lo + step * i as f64)).collect();
    let best = grid
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > grid[b] { i } else { b });
    let mut a = lo + step * best.saturating_sub(1) as f64;
    let mut b = lo + step * (best + 1).min(COARSE_GRID - 1) as f64;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iterations = 0;
    while b - a > LOG_THETA_TOL {
        iterations += 1;
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
    let mut u = 0.5 * (a + b);
    let mut fu = f(u);
    // Never report worse than the best scanned point.
    if grid[best] > fu {
        u = lo + step * best as f64;
        fu = grid[best];
    }
    let on_boundary = u - lo < 2.0 * LOG_THETA_TOL || hi - u < 2.0 * LOG_THETA_TOL;
    Ok(NbFit {
        mu_hat: mu,
        theta_hat: u.exp().clamp(THETA_FLOOR, THETA_CAP),
        loglik: fu,
        converged: !on_boundary,
        iterations,
    })
}

/// Fits [`nb_mle`] to every column.
pub fn nb_mle_columns(x: ArrayView2<u64>) -> Result<Vec<NbFit>> {
    x.columns()
        .into_iter()
        .enumerate()
        .map(|(j, col)| nb_mle(&col.to_vec()).map_err(|e| with_context(e, &format!("variable {}", j + 1))))
        .collect()
}

fn with_context(e: Error, context: &str) -> Error {
    match e {
        Error::InsufficientData(m) => Error::InsufficientData(format!("{context}: {m}")),
        Error::DegenerateData(m) => Error::DegenerateData(format!("{context}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Cov,
    NbMle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentEstimate {
    Cov(CovMatrix),
    /// One fit per variable.
    Nb(Vec<NbFit>),
}

/// Row indices of each label class `0..G`, where G = max label + 1.
/// Every class must have at least two members.
pub fn label_classes(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let g = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut classes = vec![Vec::new(); g];
    for (i, &l) in labels.iter().enumerate() {
        classes[l].push(i);
    }
    for (c, rows) in classes.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "label class {} has {} member(s), need at least 2",
                c + 1,
                rows.len()
            )));
        }
    }
    Ok(classes)
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    Ok(())
}

/// Covariance (denominator n − 1) within each label class.
pub fn per_component_cov(x: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<CovMatrix>> {
    check_labels(x.nrows(), labels)?;
    label_classes(labels)?
        .iter()
        .map(|rows| empirical_cov(x.select(Axis(0), rows).view(), Denominator::NMinus1))
        .collect()
}

/// Per-variable NB fits within each label class; `result[g][j]`.
pub fn per_component_nb(x: ArrayView2<u64>, labels: &[usize]) -> Result<Vec<Vec<NbFit>>> {
    check_labels(x.nrows(), labels)?;
    label_classes(labels)?
        .iter()
        .enumerate()
        .map(|(g, rows)| {
            nb_mle_columns(x.select(Axis(0), rows).view())
                .map_err(|e| with_context(e, &format!("label class {}", g + 1)))
        })
        .collect()
}

pub fn per_component(data: &SampleData, labels: &[usize], estimator: Estimator) -> Result<Vec<ComponentEstimate>> {
    match (data, estimator) {
        (SampleData::Real(x), Estimator::Cov) => {
            Ok(per_component_cov(x.view(), labels)?.into_iter().map(ComponentEstimate::Cov).collect())
        }
        (SampleData::Counts(x), Estimator::NbMle) => {
            Ok(per_component_nb(x.view(), labels)?.into_iter().map(ComponentEstimate::Nb).collect())
        }
        (SampleData::Counts(x), Estimator::Cov) => {
            let real = x.mapv(|v| v as f64);
            Ok(per_component_cov(real.view(), labels)?.into_iter().map(ComponentEstimate::Cov).collect())
        }
        (SampleData::Real(_), Estimator::NbMle) => {
            Err(Error::Parameter("the NB estimator needs count data".into()))
        }
    }
}

/// Sample variance with denominator n − 1.
pub fn sample_var(x: ArrayView1<f64>) -> f64 {
    mean_var(x.iter().copied(), x.len()).1
}
