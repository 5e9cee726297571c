//! Two-sample tests and the calibration and agreement metrics computed on
//! their output.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theory::dist::{normal_cdf, t_two_sided};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestMethod {
    TPooled,
    TWelch,
    WilcoxonNormalApprox,
}

/// Outcome of one two-sided two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n1: usize,
    pub n2: usize,
    pub df: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TVariant {
    Pooled,
    Welch,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sample t-test. The pooled statistic is
/// (x̄ − ȳ) / √(s²(1/n₁ + 1/n₂)) with n₁ + n₂ − 2 degrees of freedom;
/// Welch uses separate variances and the Satterthwaite degrees of freedom.
pub fn t_test(x: &[f64], y: &[f64], variant: TVariant) -> Result<TestReport> {
    let (n1, n2) = (x.len(), y.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::InsufficientData(format!("t-test needs two samples of size >= 2, got {n1} and {n2}")));
    }
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let (f1, f2) = (n1 as f64, n2 as f64);
    let (se, df, method) = match variant {
        TVariant::Pooled => {
            let sp2 = ((f1 - 1.0) * v1 + (f2 - 1.0) * v2) / (f1 + f2 - 2.0);
            ((sp2 * (1.0 / f1 + 1.0 / f2)).sqrt(), f1 + f2 - 2.0, TestMethod::TPooled)
        }
        TVariant::Welch => {
            let (a, b) = (v1 / f1, v2 / f2);
            let df = (a + b).powi(2) / (a * a / (f1 - 1.0) + b * b / (f2 - 1.0));
            ((a + b).sqrt(), df, TestMethod::TWelch)
        }
    };
    let diff = m1 - m2;
    if se == 0.0 {
        if diff == 0.0 {
            return Err(Error::ZeroVariance("both samples are constant and equal".into()));
        }
        let statistic = if diff > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(TestReport { statistic, p_value: 0.0, method, n1, n2, df: Some(df) });
    }
    let statistic = diff / se;
    Ok(TestReport { statistic, p_value: t_two_sided(statistic, df), method, n1, n2, df: Some(df) })
}

/// Mid-ranks (1-based) of `values` and the tie term Σ(t³ − t).
pub fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Wilcoxon rank-sum (Mann–Whitney) test by normal approximation with
/// tie-corrected variance and a continuity correction of ½.
///
/// The reported statistic is the standardized z value; when every value is
/// tied the variance vanishes and the report is z = 0, p = 1.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<TestReport> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InsufficientData(format!("rank-sum test needs nonempty samples, got {n1} and {n2}")));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = mid_ranks(&pooled);
    let (f1, f2) = (n1 as f64, n2 as f64);
    let n = f1 + f2;
    let w: f64 = ranks[..n1].iter().sum();
    let u = w - f1 * (f1 + 1.0) / 2.0;
    let centered = u - f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let method = TestMethod::WilcoxonNormalApprox;
    if !(var > 0.0) {
        return Ok(TestReport { statistic: 0.0, p_value: 1.0, method, n1, n2, df: None });
    }
    let z = (centered - 0.5 * centered.signum() * f64::from(centered != 0.0)) / var.sqrt();
    let p_value = (2.0 * normal_cdf(-z.abs())).min(1.0);
    Ok(TestReport { statistic: z, p_value, method, n1, n2, df: None })
}

fn choose2(k: u64) -> f64 {
    (k as f64) * (k as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two partitions given as label vectors.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("ARI needs at least 2 items, got {n}")));
    }
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&u, &v) in a.iter().zip(b) {
        *cells.entry((u, v)).or_default() += 1;
        *rows.entry(u).or_default() += 1;
        *cols.entry(v).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions trivial in the same way (one cluster, or all
        // singletons): they agree perfectly.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of p-values with p ≤ α.
pub fn rejection_rate(p_values: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Range(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if p_values.is_empty() {
        return Err(Error::Range("no p-values".into()));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Range(format!("p-value {p} outside [0, 1]")));
    }
    Ok(p_values.iter().filter(|&&p| p <= alpha).count() as f64 / p_values.len() as f64)
}

/// (expected, observed) uniform quantile pairs, expected_i = (i − ½)/m.
pub fn qq_uniform(p_values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, p)| ((i as f64 + 0.5) / m, p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1), with the
/// asymptotic Kolmogorov distribution and Stephens' small-sample
/// correction.
pub fn ks_uniform(p_values: &[f64]) -> Result<KsResult> {
    if p_values.is_empty() {
        return Err(Error::InsufficientData("no values for the KS test".into()));
    }
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &p) in sorted.iter().enumerate() {
        let p = p.clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / m - p).max(p - i as f64 / m);
    }
    let root = m.sqrt();
    let lambda = (root + 0.12 + 0.11 / root) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_sf(lambda) })
}

/// Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²λ²).
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-18 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
