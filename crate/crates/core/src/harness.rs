//! Seeded replicate engine: sample → decompose → cluster X⁽¹⁾ → test X⁽²⁾,
//! repeated over a scenario grid and aggregated into rejection rates and
//! mean ARI.
//!
//! Replicate r of grid point P draws from
//! `master_seed.derive(hash(P)).derive(r)`, and results are reduced in
//! replicate order, so summaries do not depend on the worker count.

use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_with, KMeansConfig, KMeansResult};
use crate::decompose::{gaussian_fission, gaussian_thin, nb_thin, ScalePlugin, Theta};
use crate::error::{Error, Result};
use crate::estimate::{empirical_cov, nb_mle_columns, Denominator};
use crate::linalg::CovMatrix;
use crate::rng::Seed;
use crate::samplers::{
    equicorrelated_normals, sample_mixture_with, sample_mvn_with, Components, GaussianComponent, MixtureSpec,
    NbQuantileTable, SampleData,
};
use crate::stattest::{adjusted_rand_index, ks_uniform, t_test, wilcoxon_rank_sum, TVariant};
use crate::theory::{rho_fission, type1_t, type1_z, BiasSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Well-separated Gaussian components; power between two of them.
    IdealGaussian,
    /// A k larger than the number of components forces a spurious split;
    /// `bias_grid` scales the covariance of every component after the
    /// first by (1 + bias).
    AdverseGaussian,
    /// One Gaussian component fissioned with plugin variance σ²(1 + bias).
    BiasSweep,
    /// NB mixture with a spurious split.
    NBMixtureSplit,
    /// Equicorrelated NB variables (Gaussian copula), no clusters.
    NBCorrelated,
    /// Two NB populations; variables whose parameters agree across the
    /// populations are null, the others carry signal.
    TwoPopulationSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FissionMode {
    /// Scale parameter estimated from the whole sample.
    Marginal,
    /// True labels and true per-component scale, times (1 + bias).
    ConditionalOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestKind {
    TPooled,
    TWelch,
    Wilcoxon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusteringScope {
    Multivariate,
    Univariate,
}

/// Which data model a grid point uses. The Gaussian control replaces the
/// correlated NB variables by equicorrelated Gaussians with matching
/// means and variances, decomposed jointly by Gaussian thinning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Primary,
    GaussianControl,
}

fn default_targets() -> Vec<usize> {
    vec![0, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub mixture: MixtureSpec,
    pub tau_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub bias_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub rho_grid: Option<Vec<f64>>,
    pub k_cluster: usize,
    pub fission_modes: Vec<FissionMode>,
    pub test: TestKind,
    #[serde(default)]
    pub both_t_variants: bool,
    pub replicates: usize,
    pub alpha: f64,
    pub master_seed: Seed,
    pub clustering_scope: ClusteringScope,
    #[serde(default)]
    pub kmeans: KMeansConfig,
    /// Variable tested in the Gaussian and mixture-split scenarios.
    #[serde(default)]
    pub test_variable: usize,
    /// Components whose matched clusters are compared in `IdealGaussian`.
    #[serde(default = "default_targets")]
    pub target_components: Vec<usize>,
    /// Adds the Gaussian control arm to `NBCorrelated`.
    #[serde(default)]
    pub gaussian_control: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("scenario `{}`: {m}", self.name)));
        self.mixture.validate().map_err(|e| Error::Config(format!("scenario `{}`: {e}", self.name)))?;
        if self.tau_grid.is_empty() || self.n_grid.is_empty() || self.fission_modes.is_empty() {
            return fail("tau_grid, n_grid and fission_modes must be nonempty".into());
        }
        if matches!(&self.bias_grid, Some(g) if g.is_empty()) || matches!(&self.rho_grid, Some(g) if g.is_empty()) {
            return fail("bias_grid and rho_grid must be nonempty when given".into());
        }
        if self.replicates == 0 {
            return fail("replicates must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.k_cluster < 2 {
            return fail("k_cluster must be at least 2".into());
        }
        if let Some(&n) = self.n_grid.iter().find(|&&n| n < 2 * self.k_cluster) {
            return fail(format!("n = {n} is too small for k = {}", self.k_cluster));
        }
        if let Some(b) = self.bias_grid.iter().flatten().find(|b| !(**b > -1.0) || !b.is_finite()) {
            return fail(format!("relative bias must exceed -1, got {b}"));
        }
        let is_nb = matches!(
            self.kind,
            ScenarioKind::NBMixtureSplit | ScenarioKind::NBCorrelated | ScenarioKind::TwoPopulationSynthetic
        );
        match (is_nb, self.mixture.family()) {
            (true, crate::samplers::Family::NegBin) | (false, crate::samplers::Family::Gaussian) => {}
            _ => return fail(format!("{:?} does not fit a {:?} mixture", self.kind, self.mixture.family())),
        }
        for &tau in &self.tau_grid {
            let ok = if is_nb { tau > 0.0 && tau < 1.0 } else { tau > 0.0 && tau.is_finite() };
            if !ok {
                return fail(format!("tau {tau} is out of range for {:?}", self.kind));
            }
        }
        let g = self.mixture.n_components();
        let p = self.mixture.dim();
        match self.kind {
            ScenarioKind::NBCorrelated => {
                if g != 1 {
                    return fail("NBCorrelated needs a single-component mixture".into());
                }
                if let Some(r) = self.rho_grid.iter().flatten().find(|r| !(0.0..1.0).contains(*r)) {
                    return fail(format!("rho {r} outside [0, 1)"));
                }
            }
            ScenarioKind::IdealGaussian => {
                if self.target_components.len() != 2 || self.target_components.iter().any(|&t| t >= g) {
                    return fail("target_components must name two mixture components".into());
                }
            }
            ScenarioKind::TwoPopulationSynthetic if g != 2 => {
                return fail("TwoPopulationSynthetic needs a two-component mixture".into());
            }
            _ => {}
        }
        if self.rho_grid.is_some() && self.kind != ScenarioKind::NBCorrelated {
            return fail("rho_grid is only used by NBCorrelated".into());
        }
        if self.gaussian_control && self.kind != ScenarioKind::NBCorrelated {
            return fail("gaussian_control is only used by NBCorrelated".into());
        }
        if self.test_variable >= p {
            return fail(format!("test_variable {} but the data have {p} variables", self.test_variable));
        }
        Ok(())
    }

    /// Tests run on every comparison: the configured one, plus the other
    /// t variant when `both_t_variants` is set.
    pub fn tests(&self) -> Vec<TestKind> {
        let mut t = vec![self.test];
        if self.both_t_variants {
            match self.test {
                TestKind::TPooled => t.push(TestKind::TWelch),
                TestKind::TWelch => t.push(TestKind::TPooled),
                TestKind::Wilcoxon => {}
            }
        }
        t
    }

    fn tests_all_variables(&self) -> bool {
        matches!(self.kind, ScenarioKind::NBCorrelated | ScenarioKind::TwoPopulationSynthetic)
    }

    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut arms = vec![Arm::Primary];
        if self.gaussian_control {
            arms.push(Arm::GaussianControl);
        }
        let rhos: Vec<Option<f64>> = match &self.rho_grid {
            Some(g) => g.iter().map(|r| Some(*r)).collect(),
            None => vec![None],
        };
        let mut points = Vec::new();
        for &arm in &arms {
            for &mode in &self.fission_modes {
                let biases: Vec<Option<f64>> = match &self.bias_grid {
                    Some(g) if mode == FissionMode::ConditionalOracle || self.kind == ScenarioKind::AdverseGaussian => {
                        g.iter().map(|b| Some(*b)).collect()
                    }
                    _ => vec![None],
                };
                for &rho in &rhos {
                    for &bias in &biases {
                        for &tau in &self.tau_grid {
                            for &n in &self.n_grid {
                                points.push(GridPoint { arm, mode, tau, n, bias, rho });
                            }
                        }
                    }
                }
            }
        }
        points
    }
}

/// Coordinates of one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub arm: Arm,
    pub mode: FissionMode,
    pub tau: f64,
    pub n: usize,
    pub bias: Option<f64>,
    pub rho: Option<f64>,
}

impl GridPoint {
    /// Mode column of the output, prefixed by the arm when it is not the
    /// primary one.
    pub fn mode_label(&self) -> String {
        match self.arm {
            Arm::Primary => format!("{:?}", self.mode),
            Arm::GaussianControl => format!("GaussianControl/{:?}", self.mode),
        }
    }

    pub fn key(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        format!(
            "mode={} tau={} n={} bias={} rho={}",
            self.mode_label(),
            self.tau,
            self.n,
            opt(self.bias),
            opt(self.rho)
        )
    }

    pub fn seed(&self, master: Seed) -> Seed {
        master.derive_tag(&self.key())
    }
}

/// Everything recorded about one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub point: GridPoint,
    pub replicate: usize,
    pub seed_used: Seed,
    /// ARI against the true labels (mean over variables in univariate
    /// scope); absent for single-component data.
    pub ari: Option<f64>,
    /// `p_values[t][v]`: test `t` of [`ScenarioConfig::tests`] on tested
    /// variable `v`.
    pub p_values: Vec<Vec<f64>>,
    /// Sizes of the clusters of X⁽¹⁾ (first variable in univariate scope).
    pub cluster_sizes: Vec<usize>,
    /// |n₁ − n₂| / (n₁ + n₂) of the first compared pair.
    pub imbalance: f64,
    /// False when the comparison pair could not be formed; the p-values
    /// are then 1.
    pub matched: bool,
}

/// One tidy output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub kind: String,
    pub tau: f64,
    pub n: usize,
    pub bias: Option<f64>,
    pub rho: Option<f64>,
    pub mode: String,
    pub test: String,
    pub metric: String,
    pub value: f64,
    pub se: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub point: GridPoint,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scenario: String,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<PointFailure>,
}

impl ExperimentSummary {
    /// First row matching the given mode label, metric and predicate.
    pub fn find(&self, mode: &str, metric: &str, pred: impl Fn(&ResultRow) -> bool) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.mode == mode && r.metric == metric && pred(r))
    }
}

// ---------------------------------------------------------------------------
// per-point data model

enum Sampler {
    Mixture(MixtureSpec),
    CopulaNb { tables: Vec<NbQuantileTable>, rho: f64 },
    Mvn { mean: Vec<f64>, cov: CovMatrix },
}

/// Sampler and oracle scale parameters for one grid point.
pub struct PointModel {
    sampler: Sampler,
    oracle_covs: Option<Vec<CovMatrix>>,
    oracle_thetas: Option<Vec<Vec<f64>>>,
    n_components: usize,
}

impl PointModel {
    pub fn build(cfg: &ScenarioConfig, point: &GridPoint) -> Result<Self> {
        let factor = 1.0 + point.bias.unwrap_or(0.0);
        let spec = &cfg.mixture;
        match (cfg.kind, point.arm) {
            (ScenarioKind::NBCorrelated, Arm::Primary) => {
                let c = &spec.nb_components().expect("validated NB")[0];
                let tables =
                    c.mu.iter().zip(&c.theta).map(|(m, t)| NbQuantileTable::new(*m, *t)).collect::<Result<Vec<_>>>()?;
                Ok(PointModel {
                    sampler: Sampler::CopulaNb { tables, rho: point.rho.unwrap_or(0.0) },
                    oracle_covs: None,
                    oracle_thetas: Some(vec![c.theta.iter().map(|t| t * factor).collect()]),
                    n_components: 1,
                })
            }
            (ScenarioKind::NBCorrelated, Arm::GaussianControl) => {
                let c = &spec.nb_components().expect("validated NB")[0];
                let p = c.mu.len();
                let sd: Vec<f64> = c.mu.iter().zip(&c.theta).map(|(m, t)| (m + m * m / t).sqrt()).collect();
                let rho = point.rho.unwrap_or(0.0);
                let cov = Array2::from_shape_fn((p, p), |(i, j)| if i == j { sd[i] * sd[i] } else { rho * sd[i] * sd[j] });
                let cov = CovMatrix::symmetrized(cov)?;
                Ok(PointModel {
                    oracle_covs: Some(vec![cov.scaled(factor)]),
                    sampler: Sampler::Mvn { mean: c.mu.clone(), cov },
                    oracle_thetas: None,
                    n_components: 1,
                })
            }
            (ScenarioKind::AdverseGaussian, _) => {
                let comps = spec.gaussian_components().expect("validated Gaussian");
                let scaled: Vec<GaussianComponent> = comps
                    .iter()
                    .enumerate()
                    .map(|(g, c)| GaussianComponent {
                        mean: c.mean.clone(),
                        cov: if g == 0 { c.cov.clone() } else { c.cov.scaled(factor) },
                    })
                    .collect();
                let mixture = MixtureSpec::gaussian(spec.weights.clone(), scaled.clone())?;
                Ok(PointModel {
                    sampler: Sampler::Mixture(mixture),
                    oracle_covs: Some(scaled.into_iter().map(|c| c.cov).collect()),
                    oracle_thetas: None,
                    n_components: comps.len(),
                })
            }
            _ => {
                let (oracle_covs, oracle_thetas) = match &spec.components {
                    Components::Gaussian(cs) => (Some(cs.iter().map(|c| c.cov.scaled(factor)).collect()), None),
                    Components::NegBin(cs) => {
                        (None, Some(cs.iter().map(|c| c.theta.iter().map(|t| t * factor).collect()).collect()))
                    }
                };
                Ok(PointModel {
                    sampler: Sampler::Mixture(spec.clone()),
                    oracle_covs,
                    oracle_thetas,
                    n_components: spec.n_components(),
                })
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<(SampleData, Vec<usize>)> {
        match &self.sampler {
            Sampler::Mixture(spec) => {
                let s = sample_mixture_with(rng, spec, n)?;
                Ok((s.data, s.labels))
            }
            Sampler::CopulaNb { tables, rho } => {
                let z = equicorrelated_normals(rng, *rho, n, tables.len());
                let mut x = Array2::zeros(z.dim());
                for ((i, j), v) in z.indexed_iter() {
                    x[[i, j]] = tables[j].quantile_of_normal(*v);
                }
                Ok((SampleData::Counts(x), vec![0; n]))
            }
            Sampler::Mvn { mean, cov } => Ok((SampleData::Real(sample_mvn_with(rng, mean, cov, n)?), vec![0; n])),
        }
    }
}

/// A variable is null when every component gives it the same law.
fn null_variables(spec: &MixtureSpec) -> Vec<bool> {
    let p = spec.dim();
    (0..p)
        .map(|j| match &spec.components {
            Components::Gaussian(cs) => cs.iter().all(|c| {
                c.mean[j] == cs[0].mean[j] && c.cov.get(j, j) == cs[0].cov.get(j, j)
            }),
            Components::NegBin(cs) => cs.iter().all(|c| c.mu[j] == cs[0].mu[j] && c.theta[j] == cs[0].theta[j]),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// replicate pipeline

pub fn replicate_seed(cfg: &ScenarioConfig, point: &GridPoint, r: usize) -> Seed {
    point.seed(cfg.master_seed).derive(r as u64)
}

/// Runs replicate `r` of `point`. Builds the point model on every call;
/// [`run_experiment`] shares one model across replicates.
pub fn run_replicate(cfg: &ScenarioConfig, point: &GridPoint, r: usize) -> Result<ReplicateResult> {
    cfg.validate()?;
    let model = PointModel::build(cfg, point).map_err(|e| e.in_stage("setup", point.key()))?;
    run_replicate_with(cfg, point, &model, r)
}

pub fn run_replicate_with(cfg: &ScenarioConfig, point: &GridPoint, model: &PointModel, r: usize) -> Result<ReplicateResult> {
    let seed = replicate_seed(cfg, point, r);
    let at = || format!("{} replicate={r}", point.key());
    let oracle = point.mode == FissionMode::ConditionalOracle;

    let (data, labels) = model
        .sample(&mut seed.derive_tag("sample").rng(), point.n)
        .map_err(|e| e.in_stage("sample", at()))?;

    let decompose_seed = seed.derive_tag("decompose");
    let (x1, x2) = match &data {
        SampleData::Real(x) => {
            let plugin = if oracle {
                ScalePlugin::conditional_cov(model.oracle_covs.clone().expect("Gaussian oracle"), labels.clone())
            } else {
                let cov = empirical_cov(x.view(), Denominator::NMinus1).map_err(|e| e.in_stage("estimate", at()))?;
                ScalePlugin::marginal_cov(cov)
            };
            let pair = match point.arm {
                Arm::Primary => gaussian_fission(x, point.tau, &plugin, decompose_seed),
                Arm::GaussianControl => gaussian_thin(x, point.tau, &plugin, decompose_seed),
            }
            .map_err(|e| e.in_stage("decompose", at()))?;
            (pair.x1, pair.x2)
        }
        SampleData::Counts(x) => {
            let plugin = if oracle {
                let thetas = model.oracle_thetas.clone().expect("NB oracle");
                ScalePlugin::conditional_theta(thetas.into_iter().map(Theta::PerVariable).collect(), labels.clone())
            } else {
                let fits = nb_mle_columns(x.view()).map_err(|e| e.in_stage("estimate", at()))?;
                ScalePlugin::marginal_theta(Theta::PerVariable(fits.iter().map(|f| f.theta_hat).collect()))
            };
            let pair = nb_thin(x, point.tau, &plugin, decompose_seed).map_err(|e| e.in_stage("decompose", at()))?;
            (pair.x1.mapv(|v| v as f64), pair.x2.mapv(|v| v as f64))
        }
    };

    let variables: Vec<usize> =
        if cfg.tests_all_variables() { (0..x1.ncols()).collect() } else { vec![cfg.test_variable] };
    let tests = cfg.tests();
    let cluster_seed = seed.derive_tag("cluster");
    let mut p_values = vec![Vec::with_capacity(variables.len()); tests.len()];
    let with_truth = model.n_components > 1;

    let (ari, cluster_sizes, imbalance, matched) = match cfg.clustering_scope {
        ClusteringScope::Multivariate => {
            let km = kmeans_with(x1.view(), cfg.k_cluster, &cfg.kmeans, cluster_seed)
                .map_err(|e| e.in_stage("cluster", at()))?;
            let pair = comparison_pair(cfg, &km, &labels);
            for &j in &variables {
                compare(&tests, &km.labels, pair, &x2, j, &mut p_values).map_err(|e| e.in_stage("test", at()))?;
            }
            let ari = if with_truth {
                Some(adjusted_rand_index(&km.labels, &labels).map_err(|e| e.in_stage("test", at()))?)
            } else {
                None
            };
            let sizes = km.cluster_sizes();
            (ari, sizes.clone(), pair_imbalance(&sizes, pair), pair.is_some())
        }
        ClusteringScope::Univariate => {
            let mut ari_sum = 0.0;
            let mut first: Option<(Vec<usize>, f64, bool)> = None;
            for &j in &variables {
                let col = x1.column(j).to_owned().insert_axis(Axis(1));
                let km = kmeans_with(col.view(), cfg.k_cluster, &cfg.kmeans, cluster_seed.derive(j as u64))
                    .map_err(|e| e.in_stage("cluster", at()))?;
                let pair = comparison_pair(cfg, &km, &labels);
                compare(&tests, &km.labels, pair, &x2, j, &mut p_values).map_err(|e| e.in_stage("test", at()))?;
                if with_truth {
                    ari_sum += adjusted_rand_index(&km.labels, &labels).map_err(|e| e.in_stage("test", at()))?;
                }
                if first.is_none() {
                    let sizes = km.cluster_sizes();
                    let imb = pair_imbalance(&sizes, pair);
                    first = Some((sizes, imb, pair.is_some()));
                }
            }
            let (sizes, imb, matched) = first.expect("at least one variable");
            let ari = with_truth.then(|| ari_sum / variables.len() as f64);
            (ari, sizes, imb, matched)
        }
    };

    Ok(ReplicateResult {
        point: *point,
        replicate: r,
        seed_used: seed,
        ari,
        p_values,
        cluster_sizes,
        imbalance,
        matched,
    })
}

fn pair_imbalance(sizes: &[usize], pair: Option<(usize, usize)>) -> f64 {
    match pair {
        Some((a, b)) => {
            let (a, b) = (sizes[a] as f64, sizes[b] as f64);
            (a - b).abs() / (a + b)
        }
        None => f64::NAN,
    }
}

fn compare(
    tests: &[TestKind],
    clusters: &[usize],
    pair: Option<(usize, usize)>,
    x2: &Array2<f64>,
    j: usize,
    out: &mut [Vec<f64>],
) -> Result<()> {
    let Some((a, b)) = pair else {
        out.iter_mut().for_each(|v| v.push(1.0));
        return Ok(());
    };
    let col = x2.column(j);
    let ga: Vec<f64> = clusters.iter().zip(col.iter()).filter(|(c, _)| **c == a).map(|(_, v)| *v).collect();
    let gb: Vec<f64> = clusters.iter().zip(col.iter()).filter(|(c, _)| **c == b).map(|(_, v)| *v).collect();
    for (t, kind) in tests.iter().enumerate() {
        out[t].push(test_p_value(*kind, &ga, &gb)?);
    }
    Ok(())
}

/// Two-sided p-value; samples too small or too degenerate to test count as
/// non-rejections (p = 1).
pub fn test_p_value(kind: TestKind, a: &[f64], b: &[f64]) -> Result<f64> {
    let report = match kind {
        TestKind::TPooled => t_test(a, b, TVariant::Pooled),
        TestKind::TWelch => t_test(a, b, TVariant::Welch),
        TestKind::Wilcoxon => wilcoxon_rank_sum(a, b),
    };
    match report {
        Ok(r) => Ok(r.p_value),
        Err(Error::ZeroVariance(_)) | Err(Error::InsufficientData(_)) => Ok(1.0),
        Err(e) => Err(e),
    }
}

/// Picks the two clusters to compare. With k = 2 these are the only two
/// clusters. Otherwise `IdealGaussian` compares the clusters matched to its
/// two target components, and every other kind compares the spurious pair.
pub fn comparison_pair(cfg: &ScenarioConfig, km: &KMeansResult, truth: &[usize]) -> Option<(usize, usize)> {
    if cfg.k_cluster == 2 {
        return Some((0, 1));
    }
    let g = truth.iter().copied().max().unwrap_or(0) + 1;
    let sizes = km.cluster_sizes();
    let mut table = vec![vec![0usize; g]; cfg.k_cluster];
    for (&c, &t) in km.labels.iter().zip(truth) {
        table[c][t] += 1;
    }
    match cfg.kind {
        ScenarioKind::IdealGaussian | ScenarioKind::TwoPopulationSynthetic => {
            matched_pair(&table, &sizes, cfg.target_components[0], cfg.target_components[1])
        }
        _ => spurious_pair(&table, &sizes),
    }
}

/// Cluster with the most members from `target`; ties go to the larger
/// cluster, then the lower index.
fn best_cluster_for(table: &[Vec<usize>], sizes: &[usize], target: usize) -> Option<usize> {
    (0..table.len())
        .filter(|&c| table[c][target] > 0)
        .max_by(|&a, &b| {
            (table[a][target], sizes[a]).cmp(&(table[b][target], sizes[b])).then(b.cmp(&a))
        })
}

fn matched_pair(table: &[Vec<usize>], sizes: &[usize], t1: usize, t2: usize) -> Option<(usize, usize)> {
    let a = best_cluster_for(table, sizes, t1)?;
    let b = best_cluster_for(table, sizes, t2)?;
    (a != b).then_some((a, b))
}

/// Two clusters whose majority comes from the same true component. When
/// several components qualify the one with the most such clusters wins
/// (lowest index on ties); among its clusters the two largest are taken.
fn spurious_pair(table: &[Vec<usize>], sizes: &[usize]) -> Option<(usize, usize)> {
    let g = table.first().map_or(0, |r| r.len());
    let mut by_component: Vec<Vec<usize>> = vec![Vec::new(); g];
    for (c, row) in table.iter().enumerate() {
        if sizes[c] == 0 {
            continue;
        }
        // majority component, lowest index on ties
        let major = (0..g).fold(0, |best, t| if row[t] > row[best] { t } else { best });
        by_component[major].push(c);
    }
    let (_, clusters) = by_component
        .iter()
        .enumerate()
        .filter(|(_, cs)| cs.len() >= 2)
        .fold(None::<(usize, &Vec<usize>)>, |best, (t, cs)| match best {
            Some((_, b)) if b.len() >= cs.len() => best,
            _ => Some((t, cs)),
        })?;
    let mut clusters = clusters.clone();
    clusters.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let (a, b) = (clusters[0], clusters[1]);
    Some((a.min(b), a.max(b)))
}

// ---------------------------------------------------------------------------
// experiments

/// All replicates of one grid point, in replicate order.
pub fn run_point(cfg: &ScenarioConfig, point: &GridPoint) -> Result<Vec<ReplicateResult>> {
    let model = PointModel::build(cfg, point).map_err(|e| e.in_stage("setup", point.key()))?;
    (0..cfg.replicates).into_par_iter().map(|r| run_replicate_with(cfg, point, &model, r)).collect()
}

/// Runs every grid point on a pool of `workers` threads (0: one per CPU)
/// and aggregates.
/// A failing point is reported in [`ExperimentSummary::failures`] and the
/// remaining points still run.
pub fn run_experiment(cfg: &ScenarioConfig, workers: usize) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for point in cfg.grid_points() {
            match run_point(cfg, &point) {
                Ok(results) => rows.extend(summarize_point(cfg, &point, &results)?),
                Err(e) => failures.push(PointFailure { point, error: e.to_string() }),
            }
        }
        Ok(ExperimentSummary { scenario: cfg.name.clone(), rows, failures })
    })
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

fn rate(p: impl Iterator<Item = f64>, alpha: f64) -> (f64, usize) {
    let mut hits = 0;
    let mut total = 0;
    for v in p {
        total += 1;
        if v <= alpha {
            hits += 1;
        }
    }
    (hits as f64 / total.max(1) as f64, total)
}

fn binomial_row(r: f64, reps: usize) -> (f64, Option<f64>) {
    (r, Some((r * (1.0 - r) / reps as f64).sqrt()))
}

/// Aggregates the replicates of one grid point into output rows.
pub fn summarize_point(cfg: &ScenarioConfig, point: &GridPoint, results: &[ReplicateResult]) -> Result<Vec<ResultRow>> {
    let reps = results.len();
    let row = |test: TestKind, metric: &str, value: f64, se: Option<f64>| ResultRow {
        scenario: cfg.name.clone(),
        kind: format!("{:?}", cfg.kind),
        tau: point.tau,
        n: point.n,
        bias: point.bias,
        rho: point.rho,
        mode: point.mode_label(),
        test: format!("{test:?}"),
        metric: metric.to_string(),
        value,
        se,
        replicates: reps,
        seed: cfg.master_seed.value(),
    };
    let mut rows = Vec::new();
    let alpha = cfg.alpha;

    for (t, &test) in cfg.tests().iter().enumerate() {
        let first: Vec<f64> = results.iter().map(|r| r.p_values[t][0]).collect();
        match cfg.kind {
            ScenarioKind::IdealGaussian => {
                let (v, se) = binomial_row(rate(first.iter().copied(), alpha).0, reps);
                rows.push(row(test, "power", v, se));
            }
            ScenarioKind::TwoPopulationSynthetic => {
                let model_nulls = null_variables(&cfg.mixture);
                for (metric, want_null) in [("type1_h0", true), ("power_h1", false)] {
                    let per_rep: Vec<f64> = results
                        .iter()
                        .filter_map(|r| {
                            let ps = r.p_values[t].iter().zip(&model_nulls).filter(|(_, nl)| **nl == want_null);
                            let (v, total) = rate(ps.map(|(p, _)| *p), alpha);
                            (total > 0).then_some(v)
                        })
                        .collect();
                    if !per_rep.is_empty() {
                        let (m, se) = mean_se(&per_rep);
                        rows.push(row(test, metric, m, Some(se)));
                    }
                }
            }
            ScenarioKind::NBCorrelated => {
                let (v, se) = binomial_row(rate(first.iter().copied(), alpha).0, reps);
                rows.push(row(test, "type1", v, se));
                let per_rep: Vec<f64> =
                    results.iter().map(|r| rate(r.p_values[t].iter().copied(), alpha).0).collect();
                let (m, se) = mean_se(&per_rep);
                rows.push(row(test, "type1_all_variables", m, Some(se)));
            }
            _ => {
                let (v, se) = binomial_row(rate(first.iter().copied(), alpha).0, reps);
                rows.push(row(test, "type1", v, se));
            }
        }
        if !matches!(cfg.kind, ScenarioKind::IdealGaussian | ScenarioKind::TwoPopulationSynthetic) {
            let ks = ks_uniform(&first)?;
            rows.push(row(test, "ks_stat", ks.statistic, None));
            rows.push(row(test, "ks_p", ks.p_value, None));
        }
    }

    let test0 = cfg.test;
    let aris: Vec<f64> = results.iter().filter_map(|r| r.ari).collect();
    if !aris.is_empty() {
        let (m, se) = mean_se(&aris);
        rows.push(row(test0, "ari", m, Some(se)));
    }
    if cfg.k_cluster > 2 {
        let (v, se) = binomial_row(results.iter().filter(|r| r.matched).count() as f64 / reps as f64, reps);
        rows.push(row(test0, "match_rate", v, se));
    }
    if cfg.kind == ScenarioKind::BiasSweep {
        let imb: Vec<f64> = results.iter().map(|r| r.imbalance).filter(|v| v.is_finite()).collect();
        if !imb.is_empty() {
            let (m, se) = mean_se(&imb);
            rows.push(row(test0, "cluster_imbalance", m, Some(se)));
        }
        let sigma2 = cfg.mixture.gaussian_components().expect("Gaussian")[0].cov.get(cfg.test_variable, cfg.test_variable);
        let bias = if point.mode == FissionMode::ConditionalOracle { point.bias.unwrap_or(0.0) } else { 0.0 };
        let rho = rho_fission(&BiasSpec::from_relative_bias(sigma2, bias, point.tau)?);
        rows.push(row(test0, "rho_theory", rho, None));
        if let Ok(v) = type1_t(rho, point.n, alpha) {
            rows.push(row(test0, "type1_theory_t", v, None));
        }
        if let Ok(v) = type1_z(rho, point.n, alpha) {
            rows.push(row(test0, "type1_theory_z", v, None));
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// built-in scenarios

fn gaussian(mean: &[f64], cov: CovMatrix) -> GaussianComponent {
    GaussianComponent { mean: mean.to_vec(), cov }
}

fn fission_tau_grid() -> Vec<f64> {
    (1..=15).map(|i| i as f64 / 10.0).collect()
}

/// Named configurations for the standard experiments. All use
/// 1000 replicates except `a5_twopop` (100 replicates of 500 variables).
pub fn builtin_scenarios() -> Vec<ScenarioConfig> {
    let base = |name: &str, kind, mixture, k, modes: Vec<FissionMode>, test| ScenarioConfig {
        name: name.to_string(),
        kind,
        mixture,
        tau_grid: fission_tau_grid(),
        n_grid: vec![50, 100, 200, 500],
        bias_grid: None,
        rho_grid: None,
        k_cluster: k,
        fission_modes: modes,
        test,
        both_t_variants: false,
        replicates: 1000,
        alpha: 0.05,
        master_seed: Seed(20_240_917),
        clustering_scope: ClusteringScope::Multivariate,
        kmeans: KMeansConfig::default(),
        test_variable: 0,
        target_components: default_targets(),
        gaussian_control: false,
    };
    let both = vec![FissionMode::Marginal, FissionMode::ConditionalOracle];
    let third = 1.0 / 3.0;

    let ideal = MixtureSpec::gaussian(
        vec![third, third, third],
        vec![
            gaussian(&[0.0, 0.0], CovMatrix::identity(2)),
            gaussian(&[5.0, 5.0], CovMatrix::identity(2)),
            gaussian(&[-5.0, 5.0], CovMatrix::identity(2)),
        ],
    )
    .expect("valid mixture");
    let adverse = MixtureSpec::gaussian(
        vec![0.5, 0.5],
        vec![gaussian(&[0.0, 0.0], CovMatrix::identity(2)), gaussian(&[15.0, 0.0], CovMatrix::identity(2))],
    )
    .expect("valid mixture");
    let single = MixtureSpec::gaussian(vec![1.0], vec![gaussian(&[0.0], CovMatrix::identity(1))]).expect("valid");
    let nb_split = MixtureSpec::negbin(
        vec![0.5, 0.5],
        vec![
            crate::samplers::NbComponent { mu: vec![5.0], theta: vec![5.0] },
            crate::samplers::NbComponent { mu: vec![60.0], theta: vec![40.0] },
        ],
    )
    .expect("valid mixture");
    let p = 50;
    let correlated = MixtureSpec::negbin(
        vec![1.0],
        vec![crate::samplers::NbComponent { mu: vec![5.0; p], theta: vec![10.0; p] }],
    )
    .expect("valid mixture");
    let half = 250;
    let twopop = MixtureSpec::negbin(
        vec![0.5, 0.5],
        vec![
            crate::samplers::NbComponent { mu: vec![5.0; 2 * half], theta: vec![5.0; 2 * half] },
            crate::samplers::NbComponent {
                mu: [vec![5.0; half], vec![15.0; half]].concat(),
                theta: [vec![5.0; half], vec![20.0; half]].concat(),
            },
        ],
    )
    .expect("valid mixture");

    let fig1 = base("fig1_ideal", ScenarioKind::IdealGaussian, ideal, 3, both.clone(), TestKind::TPooled);
    let mut fig2 = base("fig2_adverse", ScenarioKind::AdverseGaussian, adverse, 3, both.clone(), TestKind::TPooled);
    fig2.bias_grid = Some(vec![-0.5, 0.0, 1.0, 3.0]);
    let mut s1 = base(
        "figS1_bias",
        ScenarioKind::BiasSweep,
        single,
        2,
        vec![FissionMode::ConditionalOracle],
        TestKind::TPooled,
    );
    s1.tau_grid = vec![1.0];
    s1.n_grid = vec![50, 100, 200, 500, 1000];
    s1.bias_grid = Some(vec![-0.5, -0.3, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3, 0.5]);
    let mut fig3 = base("fig3_nb", ScenarioKind::NBMixtureSplit, nb_split, 3, both.clone(), TestKind::Wilcoxon);
    fig3.tau_grid = vec![0.5];
    fig3.n_grid = vec![100];
    let mut fig3c = base(
        "fig3c_multivariate",
        ScenarioKind::NBCorrelated,
        correlated,
        2,
        vec![FissionMode::ConditionalOracle],
        TestKind::Wilcoxon,
    );
    fig3c.tau_grid = vec![0.5];
    fig3c.n_grid = vec![100];
    fig3c.rho_grid = Some(vec![0.0, 0.3, 0.6, 0.9]);
    fig3c.bias_grid = Some(vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
    fig3c.gaussian_control = true;
    let mut a5 = base("a5_twopop", ScenarioKind::TwoPopulationSynthetic, twopop, 2, both, TestKind::Wilcoxon);
    a5.tau_grid = vec![0.5];
    a5.n_grid = vec![200];
    a5.replicates = 100;
    a5.clustering_scope = ClusteringScope::Univariate;

    vec![fig1, fig2, s1, fig3, fig3c, a5]
}

pub fn builtin_scenario(name: &str) -> Option<ScenarioConfig> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}
