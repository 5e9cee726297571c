//! Command-line front end: simulations, closed-form theory, one-off
//! decompositions and count-matrix analysis.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric or convergence error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fissionlab::cluster::KMeansConfig;
use fissionlab::decompose::{gaussian_fission, gaussian_thin, nb_thin, poisson_thin, ScalePlugin, Theta};
use fissionlab::estimate::{empirical_cov, nb_mle_columns, Denominator};
use fissionlab::harness::{builtin_scenario, builtin_scenarios, run_experiment, ClusteringScope, ScenarioConfig};
use fissionlab::io::{
    analyze_counts, filter_cells_max_zero_frac, filter_genes, read_counts, read_labels, read_real_matrix,
    read_scenario_config, write_counts, write_gene_results, write_real_matrix, write_results, AnalysisOptions,
    CountFormat, CountMatrix, GeneFilter, RealMatrix, ResultsFormat, RunManifest,
};
use fissionlab::theory::{cov_nb_thin, fission_covariance_table, rho_fission, type1_t, type1_z, BiasSpec};
use fissionlab::{CovMatrix, Error, ErrorClass, MixtureSpec, Seed};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fissionlab", version, about = "Data fission and thinning after clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory; created if missing. Every run writes manifest.json here.
    #[arg(long, default_value = "fissionlab-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in scenario or a JSON scenario config.
    Simulate {
        /// Built-in scenario name or path to a config file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        replicates: Option<usize>,
        /// Master seed; overrides the config.
        #[arg(long, env = "FISSIONLAB_SEED")]
        seed: Option<u64>,
        /// Worker threads, 0 for one per CPU.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
        format: OutFormat,
        /// Also run the other t-test variant.
        #[arg(long)]
        both_t_variants: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form quantities.
    Theory {
        #[command(subcommand)]
        which: TheoryCommand,
    },
    /// Split a data matrix into two parts.
    Decompose {
        /// CSV with a header of column ids and row ids in the first column.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        tau: f64,
        /// `auto` estimates the scale from the input; otherwise a JSON file
        /// holding {"cov": [[..]]} or {"theta": number or list}.
        #[arg(long, default_value = "auto")]
        scale: String,
        #[arg(long, env = "FISSIONLAB_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Thin, cluster and test a count matrix (rows are cells).
    Analyze {
        /// CSV (rows are cells) or MatrixMarket `.mtx` with `.cells`/`.genes` sidecars.
        #[arg(long)]
        counts: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, value_enum, default_value_t = ScopeArg::Uni)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// `cell_id,label` CSV with labels starting at 1; switches to per-label θ.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Input has genes as rows.
        #[arg(long)]
        transpose: bool,
        /// Drop cells whose fraction of zero counts exceeds this.
        #[arg(long)]
        max_zero_frac: Option<f64>,
        /// Drop genes with sample variance below this.
        #[arg(long)]
        min_variance: Option<f64>,
        /// Keep only the k most variable genes (after --min-variance).
        #[arg(long)]
        top_genes: Option<usize>,
        #[arg(long, env = "FISSIONLAB_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Built-in scenarios.
    Scenarios {
        #[command(subcommand)]
        which: ScenariosCommand,
    },
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Type I error after a two-cluster split, over a relative-bias grid.
    Type1 {
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Sample sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "100")]
        n: Vec<usize>,
        /// Relative biases (plugin − true)/true, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-covariance of the two parts.
    Cov {
        /// Gaussian mixture JSON: conditional and marginal fission table.
        #[arg(long, conflicts_with = "nb", required_unless_present = "nb")]
        mixture: Option<PathBuf>,
        /// NB thinning covariance for MU,THETA,THETA_HAT,TAU.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        nb: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum ScenariosCommand {
    /// Names and grid sizes.
    List {
        #[command(flatten)]
        common: Common,
    },
    /// Print one scenario as a JSON config.
    Show {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum MethodArg {
    GaussFission,
    GaussThin,
    Poisson,
    Nb,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Multi,
    Uni,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class) {
                Some(ErrorClass::Config) => 2,
                Some(ErrorClass::Numeric) => 4,
                Some(ErrorClass::Data) | None => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::from).with_context(|| format!("creating {}", dir.display()))
}

fn finish(mut manifest: RunManifest, started: Instant, dir: &Path) -> Result<()> {
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::Simulate { scenario, replicates, seed, workers, format, both_t_variants, common } => {
            let mut cfg = load_scenario(&scenario)?;
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            if let Some(s) = seed {
                cfg.master_seed = Seed(s);
            }
            cfg.both_t_variants |= both_t_variants;
            cfg.validate()?;
            prepare_out(&common.out)?;
            let summary = run_experiment(&cfg, workers)?;
            for f in &summary.failures {
                eprintln!("warning: {} failed: {}", f.point.key(), f.error);
            }
            let (file, fmt) = match format {
                OutFormat::Csv => (format!("{}.csv", cfg.name), ResultsFormat::Csv),
                OutFormat::Jsonl => (format!("{}.jsonl", cfg.name), ResultsFormat::JsonLines),
            };
            write_results(&summary.rows, &common.out.join(&file), fmt)?;
            let mut manifest =
                RunManifest::new("simulate", serde_json::to_value(&cfg)?, cfg.master_seed.value(), workers);
            manifest.row_counts.insert(cfg.name.clone(), summary.rows.len());
            if !summary.failures.is_empty() {
                manifest.row_counts.insert(format!("{}/failed_points", cfg.name), summary.failures.len());
            }
            eprintln!("wrote {} rows to {}", summary.rows.len(), common.out.join(&file).display());
            finish(manifest, started, &common.out)
        }
        Command::Theory { which } => theory(which, started),
        Command::Decompose { input, method, tau, scale, seed, common } => {
            prepare_out(&common.out)?;
            let (config, rows) = decompose(&input, method, tau, &scale, Seed(seed), &common.out)?;
            let mut manifest = RunManifest::new("decompose", config, seed, 1);
            manifest.row_counts.insert("x1.csv".into(), rows);
            manifest.row_counts.insert("x2.csv".into(), rows);
            finish(manifest, started, &common.out)
        }
        Command::Analyze {
            counts,
            tau,
            scope,
            k,
            labels,
            transpose,
            max_zero_frac,
            min_variance,
            top_genes,
            seed,
            common,
        } => {
            let mut m = read_counts(&counts, CountFormat::from_path(&counts))?;
            if transpose {
                m = m.transposed();
            }
            if let Some(f) = max_zero_frac {
                m = filter_cells_max_zero_frac(&m, f)?;
            }
            if let Some(v) = min_variance {
                m = filter_genes(&m, GeneFilter::MinVariance(v))?;
            }
            if let Some(t) = top_genes {
                m = filter_genes(&m, GeneFilter::TopVariable(t))?;
            }
            let label_vec = labels.as_deref().map(|p| read_labels(p, &m.cell_ids)).transpose()?;
            let scope = match scope {
                ScopeArg::Multi => ClusteringScope::Multivariate,
                ScopeArg::Uni => ClusteringScope::Univariate,
            };
            let opts = AnalysisOptions {
                tau,
                k_cluster: k,
                scope,
                labels: label_vec,
                seed: Seed(seed),
                kmeans: KMeansConfig::default(),
            };
            prepare_out(&common.out)?;
            let rows = analyze_counts(&m, &opts)?;
            write_gene_results(&rows, &common.out.join("genes.csv"))?;
            let config = json!({
                "counts": counts,
                "tau": tau,
                "k_cluster": k,
                "scope": scope,
                "labels": labels,
                "transpose": transpose,
                "max_zero_frac": max_zero_frac,
                "min_variance": min_variance,
                "top_genes": top_genes,
                "kmeans": opts.kmeans,
                "cells": m.n_cells(),
                "genes": m.n_genes(),
            });
            let mut manifest = RunManifest::new("analyze", config, seed, 1);
            manifest.row_counts.insert("genes.csv".into(), rows.len());
            eprintln!("analyzed {} genes over {} cells", m.n_genes(), m.n_cells());
            finish(manifest, started, &common.out)
        }
        Command::Scenarios { which } => match which {
            ScenariosCommand::List { common } => {
                prepare_out(&common.out)?;
                println!("name\tkind\tgrid_points\treplicates");
                let all = builtin_scenarios();
                for c in &all {
                    println!("{}\t{:?}\t{}\t{}", c.name, c.kind, c.grid_points().len(), c.replicates);
                }
                let names: Vec<&str> = all.iter().map(|c| c.name.as_str()).collect();
                let mut manifest = RunManifest::new("scenarios list", json!({ "scenarios": names }), 0, 1);
                manifest.row_counts.insert("scenarios".into(), all.len());
                finish(manifest, started, &common.out)
            }
            ScenariosCommand::Show { name, common } => {
                let cfg = builtin_scenario(&name).ok_or_else(|| config_err(format!("no built-in scenario `{name}`")))?;
                prepare_out(&common.out)?;
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                let manifest =
                    RunManifest::new("scenarios show", serde_json::to_value(&cfg)?, cfg.master_seed.value(), 1);
                finish(manifest, started, &common.out)
            }
        },
    }
}

fn load_scenario(arg: &str) -> Result<ScenarioConfig> {
    if let Some(cfg) = builtin_scenario(arg) {
        return Ok(cfg);
    }
    let path = Path::new(arg);
    if !path.exists() {
        let names: Vec<String> = builtin_scenarios().into_iter().map(|c| c.name).collect();
        return Err(config_err(format!(
            "`{arg}` is neither a built-in scenario ({}) nor a file",
            names.join(", ")
        )));
    }
    Ok(read_scenario_config(path)?)
}

fn theory(which: TheoryCommand, started: Instant) -> Result<()> {
    match which {
        TheoryCommand::Type1 { sigma2, tau, n, grid, alpha, common } => {
            prepare_out(&common.out)?;
            let mut lines = vec!["relative_bias,n,rho,type1_z,type1_t".to_string()];
            for &bias in &grid {
                let rho = rho_fission(&BiasSpec::from_relative_bias(sigma2, bias, tau)?);
                for &size in &n {
                    let z = type1_z(rho, size, alpha)?;
                    let t = type1_t(rho, size, alpha)?;
                    lines.push(format!("{bias},{size},{rho},{z},{t}"));
                }
            }
            let text = lines.join("\n") + "\n";
            print!("{text}");
            fs::write(common.out.join("type1.csv"), &text).map_err(Error::from)?;
            let config = json!({ "sigma2": sigma2, "tau": tau, "n": n, "grid": grid, "alpha": alpha });
            let mut manifest = RunManifest::new("theory type1", config, 0, 1);
            manifest.row_counts.insert("type1.csv".into(), lines.len() - 1);
            finish(manifest, started, &common.out)
        }
        TheoryCommand::Cov { mixture, nb, common } => {
            prepare_out(&common.out)?;
            let (text, config) = if let Some(v) = nb {
                let [mu, theta, theta_hat, tau] = v[..] else {
                    return Err(config_err("--nb takes MU,THETA,THETA_HAT,TAU"));
                };
                let c = cov_nb_thin(mu, theta, theta_hat, tau)?;
                (
                    format!("mu,theta,theta_hat,tau,cov\n{mu},{theta},{theta_hat},{tau},{c}\n"),
                    json!({ "nb": [mu, theta, theta_hat, tau] }),
                )
            } else {
                let path = mixture.expect("clap requires one of --mixture and --nb");
                let raw = fs::read_to_string(&path).map_err(Error::from).with_context(|| path.display().to_string())?;
                let spec: MixtureSpec =
                    serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let mut text = String::from("mode,scope,i,j,cov\n");
                for row in fission_covariance_table(&spec)? {
                    let a = row.covariance.as_array();
                    for ((i, j), v) in a.indexed_iter() {
                        text.push_str(&format!("{},{},{},{},{v}\n", row.mode, row.scope, i + 1, j + 1));
                    }
                }
                (text, json!({ "mixture": serde_json::to_value(&spec)? }))
            };
            print!("{text}");
            fs::write(common.out.join("cov.csv"), &text).map_err(Error::from)?;
            let mut manifest = RunManifest::new("theory cov", config, 0, 1);
            manifest.row_counts.insert("cov.csv".into(), text.lines().count() - 1);
            finish(manifest, started, &common.out)
        }
    }
}

/// Scale plugin from `--scale`: estimated from the data for `auto`,
/// otherwise read from JSON.
enum Scale {
    Cov(CovMatrix),
    Theta(Theta),
}

fn read_scale(path: &str) -> Result<Scale> {
    let raw = fs::read_to_string(path).map_err(Error::from).with_context(|| path.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    if let Some(cov) = v.get("cov") {
        let rows: Vec<Vec<f64>> =
            serde_json::from_value(cov.clone()).map_err(|e| Error::Config(format!("{path}: cov: {e}")))?;
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(config_err(format!("{path}: cov must be square")));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let a = ndarray::Array2::from_shape_vec((p, p), flat).expect("square");
        return Ok(Scale::Cov(CovMatrix::new(a)?));
    }
    match v.get("theta") {
        Some(serde_json::Value::Number(n)) => Ok(Scale::Theta(Theta::Scalar(n.as_f64().unwrap_or(f64::NAN)))),
        Some(t @ serde_json::Value::Array(_)) => {
            let list: Vec<f64> =
                serde_json::from_value(t.clone()).map_err(|e| Error::Config(format!("{path}: theta: {e}")))?;
            Ok(Scale::Theta(Theta::PerVariable(list)))
        }
        _ => Err(config_err(format!("{path}: expected a `cov` or `theta` field"))),
    }
}

fn decompose(input: &Path, method: MethodArg, tau: f64, scale: &str, seed: Seed, out: &Path) -> Result<(serde_json::Value, usize)> {
    let from_file = if scale == "auto" { None } else { Some(read_scale(scale)?) };
    let scale_echo;
    let rows;
    match method {
        MethodArg::GaussFission | MethodArg::GaussThin => {
            let m = read_real_matrix(input)?;
            rows = m.values.nrows();
            let cov = match from_file {
                None => empirical_cov(m.values.view(), Denominator::NMinus1)?,
                Some(Scale::Cov(c)) => c,
                Some(_) => return Err(config_err("Gaussian methods need a `cov` scale")),
            };
            scale_echo = json!({ "cov": cov.as_array().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>() });
            let plugin = ScalePlugin::marginal_cov(cov);
            let pair = if method == MethodArg::GaussFission {
                gaussian_fission(&m.values, tau, &plugin, seed)?
            } else {
                gaussian_thin(&m.values, tau, &plugin, seed)?
            };
            for (name, values) in [("x1.csv", pair.x1), ("x2.csv", pair.x2)] {
                let part = RealMatrix { values, row_ids: m.row_ids.clone(), col_ids: m.col_ids.clone() };
                write_real_matrix(&part, &out.join(name))?;
            }
        }
        MethodArg::Poisson | MethodArg::Nb => {
            let m = read_counts(input, CountFormat::from_path(input))?;
            rows = m.values.nrows();
            let pair = if method == MethodArg::Poisson {
                if matches!(from_file, Some(Scale::Cov(_)) | Some(Scale::Theta(_))) {
                    return Err(config_err("Poisson thinning takes no scale"));
                }
                scale_echo = serde_json::Value::Null;
                poisson_thin(&m.values, tau, seed)?
            } else {
                let theta = match from_file {
                    None => Theta::PerVariable(nb_mle_columns(m.values.view())?.iter().map(|f| f.theta_hat).collect()),
                    Some(Scale::Theta(t)) => t,
                    Some(_) => return Err(config_err("NB thinning needs a `theta` scale")),
                };
                scale_echo = match &theta {
                    Theta::Scalar(t) => json!({ "theta": t }),
                    Theta::PerVariable(t) => json!({ "theta": t }),
                };
                nb_thin(&m.values, tau, &ScalePlugin::marginal_theta(theta), seed)?
            };
            for (name, values) in [("x1.csv", pair.x1), ("x2.csv", pair.x2)] {
                let part = CountMatrix::new(values, m.cell_ids.clone(), m.gene_ids.clone())?;
                write_counts(&part, &out.join(name))?;
            }
        }
    }
    let config = json!({
        "input": input,
        "method": method_name(method),
        "tau": tau,
        "scale": scale,
        "scale_used": scale_echo,
    });
    Ok((config, rows))
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::GaussFission => "gauss-fission",
        MethodArg::GaussThin => "gauss-thin",
        MethodArg::Poisson => "poisson",
        MethodArg::Nb => "nb",
    }
}
