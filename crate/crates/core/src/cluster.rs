//! k-means with k-means++ seeding and parallel restarts.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once the largest squared center displacement falls below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { restarts: 10, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster of each row, `0..k`.
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    pub n_iter: usize,
    pub restarts_used: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.nrows()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

pub fn kmeans(x: ArrayView2<f64>, k: usize, restarts: usize, max_iter: usize, tol: f64, seed: Seed) -> Result<KMeansResult> {
    kmeans_with(x, k, &KMeansConfig { restarts, max_iter, tol }, seed)
}

/// Best of `cfg.restarts` Lloyd runs by inertia (lowest restart index on
/// ties). Restart r draws from `seed.derive(r)`, so the result does not
/// depend on how restarts are scheduled.
pub fn kmeans_with(x: ArrayView2<f64>, k: usize, cfg: &KMeansConfig, seed: Seed) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points cannot form {k} clusters")));
    }
    let restarts = cfg.restarts.max(1);
    let runs: Vec<KMeansResult> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(x, k, cfg, &mut seed.derive(r as u64).rng()))
        .collect();
    let mut best: Option<KMeansResult> = None;
    for run in runs {
        match &best {
            Some(b) if run.inertia >= b.inertia => {}
            _ => best = Some(run),
        }
    }
    let mut best = best.expect("at least one restart");
    best.restarts_used = restarts;
    Ok(best)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn plus_plus_init(x: ArrayView2<f64>, k: usize, rng: &mut SimRng) -> Array2<f64> {
    let (n, p) = x.dim();
    let mut centers = Array2::zeros((k, p));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), centers.row(c)));
        }
    }
    centers
}

/// Nearest center for every row (ties to the lowest index) and the
/// resulting inertia.
fn assign(x: ArrayView2<f64>, centers: &Array2<f64>, labels: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.rows().into_iter().enumerate() {
            let d = sq_dist(row, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dist[i] = best_d;
        inertia += best_d;
    }
    inertia
}

fn lloyd(x: ArrayView2<f64>, k: usize, cfg: &KMeansConfig, rng: &mut SimRng) -> KMeansResult {
    let (n, p) = x.dim();
    let mut centers = plus_plus_init(x, k, rng);
    let mut labels = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    let mut n_iter = 0;
    while n_iter < cfg.max_iter.max(1) {
        n_iter += 1;
        trace.push(assign(x, &centers, &mut labels, &mut dist));
        let mut sums = Array2::<f64>::zeros((k, p));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the point farthest from its own center.
                let far = farthest_movable(&dist, &labels, &counts);
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    sums.row_mut(labels[i]).scaled_add(-1.0, &x.row(i));
                    labels[i] = c;
                    counts[c] = 1;
                    dist[i] = 0.0;
                    sums.row_mut(c).assign(&x.row(i));
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new = sums.row(c).mapv(|v| v / counts[c] as f64);
            shift = shift.max(sq_dist(new.view(), centers.row(c)));
            centers.row_mut(c).assign(&new);
        }
        if shift < cfg.tol {
            break;
        }
    }
    let mut inertia = assign(x, &centers, &mut labels, &mut dist);
    trace.push(inertia);
    // Degenerate inputs (fewer distinct points than k) can still leave a
    // cluster empty; hand it the farthest point that can be spared.
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    for c in 0..k {
        if counts[c] == 0 {
            if let Some(i) = farthest_movable(&dist, &labels, &counts) {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                centers.row_mut(c).assign(&x.row(i));
                inertia -= dist[i];
                dist[i] = 0.0;
            }
        }
    }
    KMeansResult { labels, centers, inertia, n_iter, restarts_used: 1, inertia_trace: trace }
}

fn farthest_movable(dist: &[f64], labels: &[usize], counts: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..dist.len() {
        if counts[labels[i]] < 2 {
            continue;
        }
        if best.is_none_or(|b| dist[i] > dist[b]) {
            best = Some(i);
        }
    }
    best
}

/// Clusters every column separately (p = 1 k-means per variable).
pub fn kmeans_univariate(x: ArrayView2<f64>, k: usize, cfg: &KMeansConfig, seed: Seed) -> Result<Vec<KMeansResult>> {
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j).to_owned().insert_axis(ndarray::Axis(1));
            kmeans_with(col.view(), k, cfg, seed.derive(j as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separated_pairs() {
        let x = array![[0.0, 0.0], [0.0, 0.1], [10.0, 10.0], [10.0, 10.1]];
        let r = kmeans(x.view(), 2, 10, 300, 1e-6, Seed(1)).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
        assert!((r.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn duplicates_keep_clusters_nonempty() {
        let x = array![[1.0], [1.0], [1.0], [2.0]];
        let r = kmeans(x.view(), 3, 4, 50, 1e-9, Seed(2)).unwrap();
        assert!(r.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn too_few_points() {
        let x = array![[1.0]];
        assert!(matches!(kmeans(x.view(), 2, 1, 10, 1e-6, Seed(0)), Err(Error::InsufficientData(_))));
    }
}
