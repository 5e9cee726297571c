//! Count-matrix files, gene filtering, the per-gene count analysis, and
//! serialization of results and run manifests.
//!
//! Count matrices are stored with cells as rows. CSV files carry a header
//! row of gene ids and the cell id in the first column; MatrixMarket files
//! use coordinate `integer` storage with optional sidecar id files
//! `<path>.cells` and `<path>.genes` (one id per line). Label files are
//! two-column CSVs `cell_id,label` with 1-based labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_with, KMeansConfig, KMeansResult};
use crate::decompose::{nb_thin, ScalePlugin, Theta};
use crate::error::{Error, Result};
use crate::estimate::{label_classes, nb_mle, nb_mle_columns, sample_var, THETA_CAP};
use crate::harness::{ClusteringScope, ResultRow, ScenarioConfig};
use crate::rng::Seed;
use crate::stattest::{adjusted_rand_index, wilcoxon_rank_sum};

#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    /// n_cells × n_genes.
    pub values: Array2<u64>,
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

impl CountMatrix {
    pub fn new(values: Array2<u64>, cell_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        if values.nrows() != cell_ids.len() {
            return Err(Error::LengthMismatch { left: values.nrows(), right: cell_ids.len() });
        }
        if values.ncols() != gene_ids.len() {
            return Err(Error::LengthMismatch { left: values.ncols(), right: gene_ids.len() });
        }
        check_unique(&cell_ids)?;
        check_unique(&gene_ids)?;
        Ok(CountMatrix { values, cell_ids, gene_ids })
    }

    /// Matrix with generated ids `cell1..` and `gene1..`.
    pub fn from_values(values: Array2<u64>) -> Self {
        let cell_ids = (1..=values.nrows()).map(|i| format!("cell{i}")).collect();
        let gene_ids = (1..=values.ncols()).map(|j| format!("gene{j}")).collect();
        CountMatrix { values, cell_ids, gene_ids }
    }

    pub fn n_cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    /// Genes become cells and vice versa.
    pub fn transposed(self) -> Self {
        CountMatrix {
            values: self.values.reversed_axes().as_standard_layout().into_owned(),
            cell_ids: self.gene_ids,
            gene_ids: self.cell_ids,
        }
    }

    fn select_genes(&self, keep: &[usize]) -> Self {
        CountMatrix {
            values: self.values.select(Axis(1), keep),
            cell_ids: self.cell_ids.clone(),
            gene_ids: keep.iter().map(|&j| self.gene_ids[j].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountFormat {
    Csv,
    MatrixMarket,
}

impl CountFormat {
    /// `.mtx` means MatrixMarket, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") => CountFormat::MatrixMarket,
            _ => CountFormat::Csv,
        }
    }
}

pub fn read_counts(path: &Path, format: CountFormat) -> Result<CountMatrix> {
    match format {
        CountFormat::Csv => read_counts_csv(path),
        CountFormat::MatrixMarket => read_counts_mtx(path),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_count(path: &Path, line: usize, field: &str) -> Result<u64> {
    let v: i64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("`{field}` is not an integer count")))?;
    u64::try_from(v).map_err(|_| Error::NegativeEntry { path: path.to_path_buf(), line, value: v })
}

fn read_counts_csv(path: &Path) -> Result<CountMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let gene_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if gene_ids.is_empty() {
        return Err(parse_err(path, 1, "header has no gene columns"));
    }
    check_unique(&gene_ids)?;
    let p = gene_ids.len();
    let mut cell_ids = Vec::new();
    let mut flat = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |pos| pos.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != p + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", p + 1, rec.len())));
        }
        cell_ids.push(rec[0].trim().to_string());
        for field in rec.iter().skip(1) {
            flat.push(parse_count(path, line, field)?);
        }
    }
    check_unique(&cell_ids)?;
    let values = Array2::from_shape_vec((cell_ids.len(), p), flat).expect("shape checked per row");
    Ok(CountMatrix { values, cell_ids, gene_ids })
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_ids(path: &Path, expected: usize, prefix: &str) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok((1..=expected).map(|i| format!("{prefix}{i}")).collect());
    }
    let ids: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if ids.len() != expected {
        return Err(parse_err(path, ids.len(), format!("expected {expected} ids, found {}", ids.len())));
    }
    check_unique(&ids)?;
    Ok(ids)
}

fn read_counts_mtx(path: &Path) -> Result<CountMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, banner) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let banner = banner?.to_ascii_lowercase();
    let words: Vec<&str> = banner.split_whitespace().collect();
    if words.len() < 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" {
        return Err(parse_err(path, 1, "missing %%MatrixMarket matrix banner"));
    }
    if words[2] != "coordinate" || words[3] != "integer" || words[4] != "general" {
        return Err(parse_err(path, 1, "only `coordinate integer general` matrices are supported"));
    }
    let mut size: Option<(usize, usize, usize)> = None;
    let mut values = Array2::<u64>::zeros((0, 0));
    let mut seen = 0usize;
    for (line_no, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                let parsed: Vec<usize> = fields
                    .iter()
                    .map(|f| f.parse().map_err(|_| parse_err(path, line_no, format!("bad size field `{f}`"))))
                    .collect::<Result<_>>()?;
                if parsed.len() != 3 {
                    return Err(parse_err(path, line_no, "size line needs rows, columns and entries"));
                }
                size = Some((parsed[0], parsed[1], parsed[2]));
                values = Array2::zeros((parsed[0], parsed[1]));
            }
            Some((rows, cols, _)) => {
                if fields.len() != 3 {
                    return Err(parse_err(path, line_no, "entry needs row, column and value"));
                }
                let idx = |f: &str, max: usize| -> Result<usize> {
                    match f.parse::<usize>() {
                        Ok(i) if (1..=max).contains(&i) => Ok(i - 1),
                        _ => Err(parse_err(path, line_no, format!("index `{f}` outside 1..={max}"))),
                    }
                };
                let (i, j) = (idx(fields[0], rows)?, idx(fields[1], cols)?);
                values[[i, j]] = parse_count(path, line_no, fields[2])?;
                seen += 1;
            }
        }
    }
    let (rows, cols, nnz) = size.ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    if seen != nnz {
        return Err(parse_err(path, 0, format!("size line announces {nnz} entries, found {seen}")));
    }
    let cell_ids = read_ids(&sidecar(path, ".cells"), rows, "cell")?;
    let gene_ids = read_ids(&sidecar(path, ".genes"), cols, "gene")?;
    Ok(CountMatrix { values, cell_ids, gene_ids })
}

/// Writes the CSV layout read by [`read_counts`].
pub fn write_counts(m: &CountMatrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header = vec!["cell_id".to_string()];
    header.extend(m.gene_ids.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in m.cell_ids.iter().zip(m.values.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Real-valued table in the count layout: header row of column ids, first
/// column row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub values: Array2<f64>,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

pub fn read_real_matrix(path: &Path) -> Result<RealMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let col_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if col_ids.is_empty() {
        return Err(parse_err(path, 1, "header has no value columns"));
    }
    check_unique(&col_ids)?;
    let p = col_ids.len();
    let mut row_ids = Vec::new();
    let mut flat = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |pos| pos.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != p + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", p + 1, rec.len())));
        }
        row_ids.push(rec[0].trim().to_string());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("`{field}` is not finite")));
            }
            flat.push(v);
        }
    }
    check_unique(&row_ids)?;
    let values = Array2::from_shape_vec((row_ids.len(), p), flat).expect("shape checked per row");
    Ok(RealMatrix { values, row_ids, col_ids })
}

/// Writes a table in the layout read by [`read_real_matrix`], with values
/// in shortest round-trip form.
pub fn write_real_matrix(m: &RealMatrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(m.col_ids.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in m.row_ids.iter().zip(m.values.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `cell_id,label` CSV (1-based labels, header row) and returns
/// 0-based labels in the cell order of `cells`.
pub fn read_labels(path: &Path, cells: &[String]) -> Result<Vec<usize>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut by_cell = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected `cell_id,label`"));
        }
        let label: usize = match rec[1].trim().parse() {
            Ok(l) if l >= 1 => l,
            _ => return Err(parse_err(path, line, format!("label `{}` is not a positive integer", &rec[1]))),
        };
        if by_cell.insert(rec[0].trim().to_string(), label - 1).is_some() {
            return Err(Error::DuplicateId(rec[0].trim().to_string()));
        }
    }
    cells
        .iter()
        .map(|c| by_cell.get(c).copied().ok_or_else(|| Error::Label(format!("no label for cell `{c}`"))))
        .collect()
}

// ---------------------------------------------------------------------------
// filtering

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeneFilter {
    /// Drop genes whose sample variance is below the threshold.
    MinVariance(f64),
    /// Keep the k most variable genes (ties by gene id).
    TopVariable(usize),
}

fn gene_variances(m: &CountMatrix) -> Vec<f64> {
    m.values.columns().into_iter().map(|c| sample_var(c.mapv(|v| v as f64).view())).collect()
}

/// Subsets genes; kept genes stay in their original order.
pub fn filter_genes(m: &CountMatrix, rule: GeneFilter) -> Result<CountMatrix> {
    if m.n_cells() < 2 {
        return Err(Error::InsufficientData("gene variances need at least 2 cells".into()));
    }
    let var = gene_variances(m);
    let keep: Vec<usize> = match rule {
        GeneFilter::MinVariance(t) => {
            if !t.is_finite() {
                return Err(Error::Range(format!("variance threshold must be finite, got {t}")));
            }
            (0..m.n_genes()).filter(|&j| var[j] >= t).collect()
        }
        GeneFilter::TopVariable(k) => {
            if k == 0 || k > m.n_genes() {
                return Err(Error::Range(format!("TopVariable({k}) with {} genes", m.n_genes())));
            }
            let mut order: Vec<usize> = (0..m.n_genes()).collect();
            order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then_with(|| m.gene_ids[a].cmp(&m.gene_ids[b])));
            let mut keep = order[..k].to_vec();
            keep.sort_unstable();
            keep
        }
    };
    Ok(m.select_genes(&keep))
}

/// Drops cells whose fraction of zero counts exceeds `max_frac`.
pub fn filter_cells_max_zero_frac(m: &CountMatrix, max_frac: f64) -> Result<CountMatrix> {
    if !(0.0..=1.0).contains(&max_frac) {
        return Err(Error::Range(format!("zero fraction must lie in [0, 1], got {max_frac}")));
    }
    let p = m.n_genes() as f64;
    let keep: Vec<usize> = (0..m.n_cells())
        .filter(|&i| m.values.row(i).iter().filter(|&&v| v == 0).count() as f64 / p <= max_frac)
        .collect();
    Ok(CountMatrix {
        values: m.values.select(Axis(0), &keep),
        cell_ids: keep.iter().map(|&i| m.cell_ids[i].clone()).collect(),
        gene_ids: m.gene_ids.clone(),
    })
}

// ---------------------------------------------------------------------------
// count analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Thinning proportion in (0, 1).
    pub tau: f64,
    pub k_cluster: usize,
    pub scope: ClusteringScope,
    /// 0-based labels; when given, θ is fitted per label class and thinning
    /// is conditional.
    pub labels: Option<Vec<usize>>,
    pub seed: Seed,
    pub kmeans: KMeansConfig,
}

/// One output row per gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneResult {
    pub gene_id: String,
    /// Whole-sample θ̂.
    pub theta_hat: f64,
    /// θ̂ per label class when labels were given.
    pub theta_hat_by_label: Option<Vec<f64>>,
    pub ari: Option<f64>,
    pub p_value: f64,
    /// Cor(X⁽¹⁾ of the first gene, X⁽²⁾ of this gene).
    pub cor_x1_first: f64,
}

fn gene_context(e: Error, stage: &'static str, gene: &str) -> Error {
    e.in_stage(stage, format!("gene `{gene}`"))
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

/// The two clusters compared: both when k = 2, otherwise the two largest
/// (lower index on ties).
fn largest_pair(km: &KMeansResult) -> (usize, usize) {
    let sizes = km.cluster_sizes();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    (order[0].min(order[1]), order[0].max(order[1]))
}

fn split_test(clusters: &[usize], pair: (usize, usize), x2: &[f64]) -> Result<f64> {
    let a: Vec<f64> = clusters.iter().zip(x2).filter(|(c, _)| **c == pair.0).map(|(_, v)| *v).collect();
    let b: Vec<f64> = clusters.iter().zip(x2).filter(|(c, _)| **c == pair.1).map(|(_, v)| *v).collect();
    match wilcoxon_rank_sum(&a, &b) {
        Ok(r) => Ok(r.p_value),
        Err(Error::InsufficientData(_)) => Ok(1.0),
        Err(e) => Err(e),
    }
}

/// θ̂ for every label class and gene, `out[g][j]`. A gene that is all zero
/// within a class has nothing to thin there and gets [`THETA_CAP`].
fn conditional_thetas(m: &CountMatrix, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let classes = label_classes(labels)?;
    classes
        .iter()
        .map(|rows| {
            (0..m.n_genes())
                .map(|j| {
                    let x: Vec<u64> = rows.iter().map(|&i| m.values[[i, j]]).collect();
                    match nb_mle(&x) {
                        Ok(fit) => Ok(fit.theta_hat),
                        Err(Error::DegenerateData(_)) => Ok(THETA_CAP),
                        Err(e) => Err(gene_context(e, "estimate", &m.gene_ids[j])),
                    }
                })
                .collect()
        })
        .collect()
}

/// Thins every gene, clusters X⁽¹⁾ and runs a Wilcoxon rank-sum test on
/// X⁽²⁾ between the clusters, gene by gene.
pub fn analyze_counts(m: &CountMatrix, opts: &AnalysisOptions) -> Result<Vec<GeneResult>> {
    if !(opts.tau > 0.0 && opts.tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {}", opts.tau)));
    }
    if opts.k_cluster < 2 {
        return Err(Error::Config("k_cluster must be at least 2".into()));
    }
    if m.n_genes() == 0 {
        return Err(Error::InsufficientData("no genes to analyze".into()));
    }
    let fits = nb_mle_columns(m.values.view()).map_err(|e| e.in_stage("estimate", "marginal fit"))?;
    let theta_hat: Vec<f64> = fits.iter().map(|f| f.theta_hat).collect();
    let (plugin, by_label) = match &opts.labels {
        None => (ScalePlugin::marginal_theta(Theta::PerVariable(theta_hat.clone())), None),
        Some(labels) => {
            if labels.len() != m.n_cells() {
                return Err(Error::Label(format!("{} labels for {} cells", labels.len(), m.n_cells())));
            }
            let thetas = conditional_thetas(m, labels)?;
            let plugin =
                ScalePlugin::conditional_theta(thetas.iter().cloned().map(Theta::PerVariable).collect(), labels.clone());
            (plugin, Some(thetas))
        }
    };
    let pair = nb_thin(&m.values, opts.tau, &plugin, opts.seed.derive_tag("decompose"))?;
    let x1 = pair.x1.mapv(|v| v as f64);
    let x2 = pair.x2.mapv(|v| v as f64);
    let cluster_seed = opts.seed.derive_tag("cluster");
    let first_x1 = x1.column(0).to_vec();

    let ari_of = |clusters: &[usize]| -> Result<Option<f64>> {
        opts.labels.as_ref().map(|l| adjusted_rand_index(clusters, l)).transpose()
    };
    let shared = match opts.scope {
        ClusteringScope::Multivariate => {
            let km = kmeans_with(x1.view(), opts.k_cluster, &opts.kmeans, cluster_seed)?;
            let ari = ari_of(&km.labels)?;
            Some((km, ari))
        }
        ClusteringScope::Univariate => None,
    };

    (0..m.n_genes())
        .map(|j| {
            let id = &m.gene_ids[j];
            let x2j = x2.column(j).to_vec();
            let (p_value, ari) = match &shared {
                Some((km, ari)) => (split_test(&km.labels, largest_pair(km), &x2j), *ari),
                None => {
                    let col = x1.column(j).to_owned().insert_axis(Axis(1));
                    let km = kmeans_with(col.view(), opts.k_cluster, &opts.kmeans, cluster_seed.derive(j as u64))
                        .map_err(|e| gene_context(e, "cluster", id))?;
                    (split_test(&km.labels, largest_pair(&km), &x2j), ari_of(&km.labels)?)
                }
            };
            Ok(GeneResult {
                gene_id: id.clone(),
                theta_hat: theta_hat[j],
                theta_hat_by_label: by_label.as_ref().map(|t| t.iter().map(|g| g[j]).collect()),
                ari,
                p_value: p_value.map_err(|e| gene_context(e, "test", id))?,
                cor_x1_first: correlation(&first_x1, &x2j),
            })
        })
        .collect()
}

pub fn write_gene_results(rows: &[GeneResult], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["gene_id", "theta_hat", "theta_hat_by_label", "ari", "p_value", "cor_x1_first"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        let by_label = r
            .theta_hat_by_label
            .as_ref()
            .map_or_else(String::new, |t| t.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"));
        w.write_record([
            r.gene_id.clone(),
            r.theta_hat.to_string(),
            by_label,
            opt(r.ari),
            r.p_value.to_string(),
            r.cor_x1_first.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment results

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResultsFormat {
    Csv,
    JsonLines,
}

pub const RESULT_COLUMNS: [&str; 13] =
    ["scenario", "kind", "tau", "n", "bias", "rho", "mode", "test", "metric", "value", "se", "replicates", "seed"];

/// Writes rows in long format. Floats use the shortest representation
/// that parses back to the same value; an empty row set gives a header-only
/// CSV (or an empty JSON-Lines file).
pub fn write_results(rows: &[ResultRow], path: &Path, format: ResultsFormat) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        ResultsFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(file);
            w.write_record(RESULT_COLUMNS)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ResultsFormat::JsonLines => {
            let mut file = file;
            for r in rows {
                serde_json::to_writer(&mut file, r)?;
                file.write_all(b"\n")?;
            }
            file.flush()?;
        }
    }
    Ok(())
}

pub fn read_results(path: &Path, format: ResultsFormat) -> Result<Vec<ResultRow>> {
    match format {
        ResultsFormat::Csv => {
            let mut reader = csv::Reader::from_path(path)?;
            let rows = reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
            Ok(rows)
        }
        ResultsFormat::JsonLines => {
            let reader = BufReader::new(File::open(path)?);
            let mut rows = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                rows.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?);
            }
            Ok(rows)
        }
    }
}

// ---------------------------------------------------------------------------
// configs and manifests

/// Parses a JSON scenario config and validates it.
pub fn read_scenario_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Conventions that a reader of the outputs needs to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFlags {
    pub relative_bias: String,
    pub copula: String,
    pub labels: String,
}

impl Default for DesignFlags {
    fn default() -> Self {
        DesignFlags {
            relative_bias: "(plugin - true) / true, applied to the variance or to theta".into(),
            copula: "one-factor Gaussian copula, NB quantile transform".into(),
            labels: "0-based in memory, 1-based in label files".into(),
        }
    }
}

/// Everything needed to rerun a CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    /// Echo of the effective configuration.
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub workers: usize,
    pub wall_clock_seconds: f64,
    /// Output rows per scenario or output file.
    pub row_counts: BTreeMap<String, usize>,
    pub design: DesignFlags,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, master_seed: u64, workers: usize) -> Self {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.into(),
            config,
            master_seed,
            workers,
            wall_clock_seconds: 0.0,
            row_counts: BTreeMap::new(),
            design: DesignFlags::default(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn top_variable_ties_by_id() {
        // genes b and a have equal variance
        let m = CountMatrix::new(
            array![[0, 0, 1], [2, 2, 1], [4, 4, 1]],
            vec!["c1".into(), "c2".into(), "c3".into()],
            vec!["b".into(), "a".into(), "z".into()],
        )
        .unwrap();
        let top = filter_genes(&m, GeneFilter::TopVariable(1)).unwrap();
        assert_eq!(top.gene_ids, vec!["a".to_string()]);
        let kept = filter_genes(&m, GeneFilter::MinVariance(0.01)).unwrap();
        assert_eq!(kept.gene_ids, vec!["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn zero_fraction_filter() {
        let m = CountMatrix::from_values(array![[0, 0, 1], [1, 2, 3]]);
        let f = filter_cells_max_zero_frac(&m, 0.5).unwrap();
        assert_eq!(f.cell_ids, vec!["cell2".to_string()]);
    }

    #[test]
    fn largest_pair_prefers_size_then_index() {
        let km = KMeansResult {
            labels: vec![0, 1, 1, 2, 2],
            centers: Array2::zeros((3, 1)),
            inertia: 0.0,
            n_iter: 1,
            restarts_used: 1,
            inertia_trace: vec![],
        };
        assert_eq!(largest_pair(&km), (1, 2));
    }

    #[test]
    fn real_matrix_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("x.csv");
        let m = RealMatrix {
            values: array![[0.1 + 0.2, -3.0], [1e-300, 2.5]],
            row_ids: vec!["r1".into(), "r2".into()],
            col_ids: vec!["a".into(), "b".into()],
        };
        write_real_matrix(&m, &p).unwrap();
        assert_eq!(read_real_matrix(&p).unwrap(), m);
        std::fs::write(&p, "id,a\nr1,nan\n").unwrap();
        assert!(matches!(read_real_matrix(&p), Err(Error::Parse { line: 2, .. })));
    }
}
