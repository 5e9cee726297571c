use std::fs;
use std::path::{Path, PathBuf};

use fissionlab::cluster::KMeansConfig;
use fissionlab::harness::{builtin_scenario, run_experiment, ClusteringScope, ResultRow};
use fissionlab::io::{
    analyze_counts, filter_cells_max_zero_frac, filter_genes, read_counts, read_labels, read_results,
    read_scenario_config, write_counts, write_gene_results, write_results, AnalysisOptions, CountFormat, CountMatrix,
    GeneFilter, ResultsFormat, RunManifest, RESULT_COLUMNS,
};
use fissionlab::samplers::{sample_correlated_nb, sample_mixture};
use fissionlab::stattest::rejection_rate;
use fissionlab::{Error, MixtureSpec, NbComponent, Seed};
use ndarray::array;
use tempfile::TempDir;

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn csv_round_trip() {
    let dir = TempDir::new().unwrap();
    let m = CountMatrix::new(array![[0, 7], [3, 12]], ids("c", 2), vec!["g1".into(), "g2".into()]).unwrap();
    let p = dir.path().join("m.csv");
    write_counts(&m, &p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "cell_id,g1,g2\nc1,0,7\nc2,3,12\n");
    assert_eq!(read_counts(&p, CountFormat::Csv).unwrap(), m);
    assert_eq!(CountFormat::from_path(&p), CountFormat::Csv);
}

#[test]
fn matrix_market_with_implicit_zero() {
    let dir = TempDir::new().unwrap();
    let p = write(
        &dir,
        "m.mtx",
        "%%MatrixMarket matrix coordinate integer general\n% comment\n2 3 5\n1 1 4\n1 2 1\n1 3 9\n2 1 2\n2 3 6\n",
    );
    write(&dir, "m.mtx.genes", "a\nb\nc\n");
    let m = read_counts(&p, CountFormat::from_path(&p)).unwrap();
    assert_eq!(m.values, array![[4, 1, 9], [2, 0, 6]]);
    assert_eq!(m.gene_ids, vec!["a", "b", "c"]);
    assert_eq!(m.cell_ids, vec!["cell1", "cell2"]);

    let bad = write(&dir, "r.mtx", "%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 2.5\n");
    assert!(matches!(read_counts(&bad, CountFormat::MatrixMarket), Err(Error::Parse { .. })));
}

#[test]
fn csv_validation_errors() {
    let dir = TempDir::new().unwrap();
    let dup = write(&dir, "dup.csv", "cell,g1,g2,g1\nc1,1,2,3\n");
    match read_counts(&dup, CountFormat::Csv) {
        Err(Error::DuplicateId(id)) => assert_eq!(id, "g1"),
        other => panic!("{other:?}"),
    }
    let neg = write(&dir, "neg.csv", "cell,g1\nc1,1\nc2,-3\n");
    match read_counts(&neg, CountFormat::Csv) {
        Err(Error::NegativeEntry { line, value, .. }) => assert_eq!((line, value), (3, -3)),
        other => panic!("{other:?}"),
    }
    let junk = write(&dir, "junk.csv", "cell,g1,g2\nc1,1,2\nc2,1,x\n");
    match read_counts(&junk, CountFormat::Csv) {
        Err(e @ Error::Parse { .. }) => {
            let Error::Parse { line, .. } = e else { unreachable!() };
            assert_eq!(line, 3);
        }
        other => panic!("{other:?}"),
    }
    let short = write(&dir, "short.csv", "cell,g1,g2\nc1,1\n");
    assert!(matches!(read_counts(&short, CountFormat::Csv), Err(Error::Parse { line: 2, .. })));
    let dup_cell = write(&dir, "dc.csv", "cell,g1\nc1,1\nc1,2\n");
    assert!(matches!(read_counts(&dup_cell, CountFormat::Csv), Err(Error::DuplicateId(id)) if id == "c1"));
}

#[test]
fn transpose_swaps_roles() {
    let m = CountMatrix::new(array![[1, 2, 3], [4, 5, 6]], ids("g", 2), ids("c", 3)).unwrap();
    let t = m.transposed();
    assert_eq!(t.values, array![[1, 4], [2, 5], [3, 6]]);
    assert_eq!(t.cell_ids, ids("c", 3));
    assert_eq!(t.gene_ids, ids("g", 2));
}

#[test]
fn gene_filters() {
    let values = array![[1, 5, 0, 10, 3], [1, 7, 4, 0, 3], [1, 5, 8, 10, 4], [1, 7, 0, 0, 3]];
    let m = CountMatrix::new(values.clone(), ids("c", 4), ids("g", 5)).unwrap();
    assert_eq!(filter_genes(&m, GeneFilter::TopVariable(5)).unwrap(), m);

    let kept = filter_genes(&m, GeneFilter::MinVariance(0.01)).unwrap();
    assert!(!kept.gene_ids.contains(&"g1".to_string()));
    assert_eq!(kept.n_genes(), 4);
    assert_eq!(kept.n_cells(), 4);

    // brute-force ranking
    let var = |j: usize| {
        let col: Vec<f64> = values.column(j).iter().map(|&v| v as f64).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0
    };
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| var(b).total_cmp(&var(a)));
    let mut expected: Vec<usize> = order[..3].to_vec();
    expected.sort();
    let top = filter_genes(&m, GeneFilter::TopVariable(3)).unwrap();
    assert_eq!(top.gene_ids, expected.iter().map(|j| format!("g{}", j + 1)).collect::<Vec<_>>());

    assert!(matches!(filter_genes(&m, GeneFilter::TopVariable(6)), Err(Error::Range(_))));
    assert!(matches!(filter_genes(&m, GeneFilter::TopVariable(0)), Err(Error::Range(_))));
}

#[test]
fn top_variable_ties_by_id() {
    // b and a tie; a wins on id
    let m = CountMatrix::new(array![[0, 0, 1], [2, 2, 1]], ids("c", 2), vec!["b".into(), "a".into(), "z".into()]).unwrap();
    let top = filter_genes(&m, GeneFilter::TopVariable(1)).unwrap();
    assert_eq!(top.gene_ids, vec!["a"]);
    assert_eq!(top, filter_genes(&m, GeneFilter::TopVariable(1)).unwrap());
}

#[test]
fn zero_fraction_filter() {
    let m = CountMatrix::new(array![[0, 0, 1], [2, 2, 1], [0, 0, 0]], ids("c", 3), ids("g", 3)).unwrap();
    let f = filter_cells_max_zero_frac(&m, 0.5).unwrap();
    assert_eq!(f.cell_ids, vec!["c2"]);
    assert_eq!(filter_cells_max_zero_frac(&m, 1.0).unwrap(), m);
}

#[test]
fn labels_file() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "l.csv", "cell_id,label\nc2,2\nc1,1\nc3,2\n");
    assert_eq!(read_labels(&p, &ids("c", 3)).unwrap(), vec![0, 1, 1]);
    assert!(matches!(read_labels(&p, &ids("c", 4)), Err(Error::Label(_))));
    let zero = write(&dir, "z.csv", "cell_id,label\nc1,0\n");
    assert!(matches!(read_labels(&zero, &ids("c", 1)), Err(Error::Parse { .. })));
}

fn sample_rows() -> Vec<ResultRow> {
    vec![
        ResultRow {
            scenario: "s".into(),
            kind: "BiasSweep".into(),
            tau: 0.1,
            n: 50,
            bias: Some(-0.05),
            rho: None,
            mode: "ConditionalOracle".into(),
            test: "TPooled".into(),
            metric: "type1".into(),
            value: 0.1 + 0.2,
            se: Some(1.0 / 3.0),
            replicates: 1000,
            seed: u64::MAX,
        },
        ResultRow {
            scenario: "s,with comma".into(),
            kind: "NBCorrelated".into(),
            tau: 0.5,
            n: 100,
            bias: None,
            rho: Some(0.9),
            mode: "GaussianControl/ConditionalOracle".into(),
            test: "Wilcoxon".into(),
            metric: "ks_p".into(),
            value: 1e-300,
            se: None,
            replicates: 3,
            seed: 0,
        },
    ]
}

#[test]
fn results_round_trip() {
    let dir = TempDir::new().unwrap();
    for (name, format) in [("r.csv", ResultsFormat::Csv), ("r.jsonl", ResultsFormat::JsonLines)] {
        let p = dir.path().join(name);
        write_results(&sample_rows(), &p, format).unwrap();
        assert_eq!(read_results(&p, format).unwrap(), sample_rows());
        let text = fs::read_to_string(&p).unwrap();
        assert!(!text.contains('\r'));
    }
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
    assert!(text.contains("0.30000000000000004"));
}

#[test]
fn empty_results_have_header_only() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("e.csv");
    write_results(&[], &p, ResultsFormat::Csv).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), format!("{}\n", RESULT_COLUMNS.join(",")));
    assert!(read_results(&p, ResultsFormat::Csv).unwrap().is_empty());
    let j = dir.path().join("e.jsonl");
    write_results(&[], &j, ResultsFormat::JsonLines).unwrap();
    assert_eq!(fs::read_to_string(&j).unwrap(), "");
}

#[test]
fn golden_summary_is_byte_stable() {
    let mut cfg = builtin_scenario("fig3_nb").unwrap();
    cfg.replicates = 20;
    let s = run_experiment(&cfg, 3).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("golden.csv");
    write_results(&s.rows, &p, ResultsFormat::Csv).unwrap();
    let got = fs::read(&p).unwrap();
    let golden = fixture("fig3_nb_r20.csv");
    if std::env::var_os("FISSIONLAB_BLESS").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &got).unwrap();
    }
    let want = fs::read(&golden).expect("golden fixture missing; run once with FISSIONLAB_BLESS=1");
    assert!(got == want, "output differs from {}", golden.display());
}

#[test]
fn scenario_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = builtin_scenario("fig3_nb").unwrap();
    let p = write(&dir, "c.json", &serde_json::to_string_pretty(&cfg).unwrap());
    assert_eq!(read_scenario_config(&p).unwrap(), cfg);
    let bad = write(&dir, "b.json", "{\"name\": 3}");
    assert!(matches!(read_scenario_config(&bad), Err(Error::Config(_))));
    let mut invalid = cfg.clone();
    invalid.replicates = 0;
    let p = write(&dir, "i.json", &serde_json::to_string(&invalid).unwrap());
    assert!(matches!(read_scenario_config(&p), Err(Error::Config(_))));
}

#[test]
fn manifest_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = builtin_scenario("figS1_bias").unwrap();
    let mut m = RunManifest::new("simulate", serde_json::to_value(&cfg).unwrap(), 42, 4);
    m.row_counts.insert("figS1_bias".into(), 12);
    m.wall_clock_seconds = 1.5;
    let p = dir.path().join("manifest.json");
    m.write(&p).unwrap();
    let back = RunManifest::read(&p).unwrap();
    assert_eq!(back, m);
    assert!(!back.design.relative_bias.is_empty());
    assert!(!back.artifact_version.is_empty());
}

fn options(scope: ClusteringScope, labels: Option<Vec<usize>>, seed: u64) -> AnalysisOptions {
    AnalysisOptions { tau: 0.5, k_cluster: 2, scope, labels, seed: Seed(seed), kmeans: KMeansConfig::default() }
}

fn rate(rows: &[fissionlab::io::GeneResult]) -> f64 {
    rejection_rate(&rows.iter().map(|r| r.p_value).collect::<Vec<_>>(), 0.05).unwrap()
}

#[test]
fn homogeneous_counts_are_calibrated() {
    let values = sample_correlated_nb(5.0, 5.0, 0.0, 200, 2500, Seed(1)).unwrap();
    let m = CountMatrix::from_values(values);
    let rows = analyze_counts(&m, &options(ClusteringScope::Univariate, None, 2)).unwrap();
    assert_eq!(rows.len(), 2500);
    let r = rate(&rows);
    assert!((0.037..=0.063).contains(&r), "homogeneous rejection rate {r} outside [0.037, 0.063]");
    assert!(rows.iter().all(|g| g.ari.is_none() && g.theta_hat_by_label.is_none()));
}

#[test]
fn correlated_counts_inflate_multivariate() {
    let values = sample_correlated_nb(5.0, 10.0, 0.9, 200, 50, Seed(3)).unwrap();
    let m = CountMatrix::from_values(values);
    let rows = analyze_counts(&m, &options(ClusteringScope::Multivariate, None, 4)).unwrap();
    let r = rate(&rows);
    assert!(r > 0.5, "{r}");
    // leakage shows up as positive correlation with the first gene's X1
    let mean_cor = rows[1..].iter().map(|g| g.cor_x1_first).sum::<f64>() / 49.0;
    assert!(mean_cor > 0.0, "{mean_cor}");
}

#[test]
fn labeled_two_population_analysis() {
    let null = NbComponent { mu: vec![5.0; 200], theta: vec![5.0; 200] };
    let mut alt = null.clone();
    for j in 100..200 {
        alt.mu[j] = 15.0;
        alt.theta[j] = 20.0;
    }
    let spec = MixtureSpec::negbin(vec![0.5, 0.5], vec![null, alt]).unwrap();
    let mut h0 = Vec::new();
    let mut h1 = Vec::new();
    for rep in 0..5 {
        let s = sample_mixture(&spec, 200, Seed(10 + rep)).unwrap();
        let m = CountMatrix::from_values(s.data.as_counts().unwrap().clone());
        let rows = analyze_counts(&m, &options(ClusteringScope::Univariate, Some(s.labels.clone()), 20 + rep)).unwrap();
        assert!(rows.iter().all(|g| g.ari.is_some() && g.theta_hat_by_label.as_ref().unwrap().len() == 2));
        h0.extend(rows[..100].iter().map(|g| g.p_value));
        h1.extend(rows[100..].iter().map(|g| g.p_value));
    }
    let (a0, a1) = (rejection_rate(&h0, 0.05).unwrap(), rejection_rate(&h1, 0.05).unwrap());
    assert!((a0 - 0.05).abs() <= 3.0 * (0.05 * 0.95 / 500.0f64).sqrt(), "H0 rejection rate {a0} not within 3 SE of 0.05");
    assert!(a1 > 0.5, "{a1}");
}

#[test]
fn analysis_output_file() {
    let m = CountMatrix::new(array![[1, 5], [3, 0], [8, 2], [0, 9], [2, 2], [4, 1]], ids("c", 6), ids("g", 2)).unwrap();
    let rows = analyze_counts(&m, &options(ClusteringScope::Multivariate, None, 5)).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("genes.csv");
    write_gene_results(&rows, &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("gene_id,theta_hat,theta_hat_by_label,ari,p_value,cor_x1_first\ng1,"));
    assert_eq!(text.lines().count(), 3);
    let mut bad = options(ClusteringScope::Multivariate, Some(vec![0; 5]), 5);
    assert!(matches!(analyze_counts(&m, &bad), Err(Error::Label(_))));
    bad.labels = None;
    bad.tau = 1.0;
    assert!(matches!(analyze_counts(&m, &bad), Err(Error::Config(_))));
}
