use std::fs;
use std::path::Path;

use hypersci::io_util::{format_column, write_atomic};
use hypersci::model::{estimate_ite, forward, load_checkpoint, save_checkpoint};
use hypersci::simulate::{load_dataset, save_dataset};
use hypersci::train::{
    case_study_grid, comparison_csv, loss_history_csv, metrics, metrics_on, run_comparison, split_nodes, summary_csv,
    sweep as run_sweep, train as train_model, CaseStudyGrid, Comparison, MetricsDocument,
};
use hypersci::{SimDataset, TrainConfig};
use log::info;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

fn prepare_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = out.join(name);
    write_atomic(&path, contents.as_bytes()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    s.push('\n');
    write(out, name, &s)
}

fn record_config(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    write(out, RESOLVED_CONFIG, &cfg.to_toml()?)
}

/// The configured dataset directory, or a fresh draw from the generator.
fn dataset(cfg: &ExperimentConfig) -> Result<SimDataset, CliError> {
    match &cfg.dataset {
        Some(dir) => {
            info!("loading dataset from {}", dir.display());
            load_dataset(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
        }
        None => cfg.experiment().dataset(cfg.resolved_seed()).map_err(CliError::runtime),
    }
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let data = dataset(&ExperimentConfig {
        dataset: None,
        ..cfg.clone()
    })?;
    prepare_dir(out)?;
    save_dataset(&data, out).map_err(CliError::runtime)?;
    record_config(cfg, out)?;
    info!(
        "wrote {} nodes, {} hyperedges to {}",
        data.num_nodes(),
        data.h.num_edges(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let data = dataset(cfg)?;
    check_dim(cfg, &data)?;
    let (params, report) = train_model(&data, &cfg.train).map_err(CliError::runtime)?;
    prepare_dir(out)?;
    save_checkpoint(&params, out.join("checkpoint.json")).map_err(CliError::runtime)?;
    write_json(out, "metrics.json", &MetricsDocument::new(cfg, &cfg.train, &report))?;
    write(out, "loss_history.csv", &loss_history_csv(&report.loss_history))?;
    write(out, "tau_hat.csv", &format_column(&report.tau_hat))?;
    record_config(cfg, out)?;
    println!(
        "{}: sqrt_pehe={} ate_err={}",
        report.variant, report.pehe_sqrt, report.ate_err
    );
    Ok(())
}

fn check_dim(cfg: &ExperimentConfig, data: &SimDataset) -> Result<(), CliError> {
    cfg.train
        .model_config(data.x.cols())
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct Scores {
    pehe_sqrt: f64,
    ate_err: f64,
}

#[derive(Serialize)]
struct Evaluation<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    variant: String,
    test: Scores,
    all_nodes: Scores,
}

pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("no checkpoint given (--checkpoint or `checkpoint`)".into()))?;
    let params = load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let data = dataset(cfg)?;
    let fwd = forward(&data.x, &data.t, &data.h, &params).map_err(CliError::runtime)?;
    let tau_hat = estimate_ite(&fwd);
    let split = split_nodes(data.num_nodes(), cfg.train.split_ratios, cfg.train.seed);
    let (pehe_test, ate_test) = metrics_on(&tau_hat, &data.tau, &split.test).map_err(CliError::runtime)?;
    let (pehe_all, ate_all) = metrics(&tau_hat, &data.tau).map_err(CliError::runtime)?;
    prepare_dir(out)?;
    write_json(
        out,
        "evaluation.json",
        &Evaluation {
            config: cfg,
            seed: cfg.resolved_seed(),
            variant: params.config().variant.to_string(),
            test: Scores {
                pehe_sqrt: pehe_test,
                ate_err: ate_test,
            },
            all_nodes: Scores {
                pehe_sqrt: pehe_all,
                ate_err: ate_all,
            },
        },
    )?;
    write(out, "tau_hat.csv", &format_column(&tau_hat))?;
    record_config(cfg, out)?;
    println!("test: sqrt_pehe={pehe_test} ate_err={ate_test}");
    Ok(())
}

#[derive(Serialize)]
struct ComparisonDocument<'a> {
    config: &'a ExperimentConfig,
    seeds: Vec<u64>,
    comparisons: &'a [Comparison],
}

fn print_summary(c: &Comparison) {
    for s in &c.summary {
        let param = s.param.map(|p| format!(" @ {p}")).unwrap_or_default();
        println!(
            "{}{param}: sqrt_pehe {:.4} ± {:.4}, ate_err {:.4} ± {:.4}",
            s.method, s.pehe_mean, s.pehe_stderr, s.ate_mean, s.ate_stderr
        );
    }
}

pub fn compare(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate_multi()?;
    let seeds = cfg.seed_list();
    let comparison = if cfg.dataset.is_some() {
        // A fixed dataset: only the split and initialisation vary with the seed.
        let data = dataset(cfg)?;
        check_dim(cfg, &data)?;
        run_comparison(|_| Ok(data.clone()), &cfg.methods, &seeds, &cfg.train, cfg.execution)
    } else {
        cfg.experiment().compare(&cfg.methods, &seeds, cfg.execution)
    }
    .map_err(CliError::runtime)?;
    prepare_dir(out)?;
    write(out, "comparison.csv", &comparison_csv(&comparison.runs))?;
    write(out, "summary.csv", &summary_csv([&comparison]))?;
    write_json(
        out,
        "comparison.json",
        &ComparisonDocument {
            config: cfg,
            seeds,
            comparisons: std::slice::from_ref(&comparison),
        },
    )?;
    record_config(cfg, out)?;
    print_summary(&comparison);
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate_multi()?;
    let spec = cfg.validate_sweep()?;
    if cfg.dataset.is_some() {
        return Err(CliError::Config("sweep draws its own datasets; remove `dataset`".into()));
    }
    let seeds = cfg.seed_list();
    let points = run_sweep(
        spec.kind,
        &spec.values,
        &cfg.experiment(),
        &cfg.methods,
        &seeds,
        cfg.execution,
    )
    .map_err(CliError::runtime)?;
    let comparisons: Vec<Comparison> = points.into_iter().map(|p| p.comparison).collect();
    prepare_dir(out)?;
    write(
        out,
        "sweep.csv",
        &comparison_csv(comparisons.iter().flat_map(|c| c.runs.iter())),
    )?;
    write(out, "sweep_summary.csv", &summary_csv(&comparisons))?;
    write_json(
        out,
        "sweep.json",
        &ComparisonDocument {
            config: cfg,
            seeds,
            comparisons: &comparisons,
        },
    )?;
    record_config(cfg, out)?;
    comparisons.iter().for_each(print_summary);
    Ok(())
}

#[derive(Serialize)]
struct CaseStudyDocument<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    methods: [String; 2],
    pehe_sqrt: [f64; 2],
    grid: &'a CaseStudyGrid,
}

pub fn case_study(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let data = dataset(cfg)?;
    check_dim(cfg, &data)?;
    let [va, vb] = cfg.case_study.methods;
    let fit = |variant| -> Result<_, CliError> {
        let tc = TrainConfig { variant, ..cfg.train };
        let (_, report) = train_model(&data, &tc).map_err(CliError::runtime)?;
        Ok(report)
    };
    let (a, b) = (fit(va)?, fit(vb)?);
    let grid = case_study_grid(&data.h, &data.t, &a.tau_hat, &b.tau_hat, cfg.case_study.bins)
        .map_err(CliError::runtime)?;

    let mut csv = String::from("size_bin,homophily_bin,size_min,homophily_lo,homophily_hi,count,mean_abs_diff\n");
    let bins = grid.bins;
    for sb in 0..bins {
        let size_min = if sb == 0 { 1 } else { grid.size_thresholds.get(sb - 1).copied().unwrap_or(0) };
        for hb in 0..bins {
            let cell = grid.cells[sb][hb].map(|v| v.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{sb},{hb},{size_min},{},{},{},{cell}\n",
                hb as f64 / bins as f64,
                (hb + 1) as f64 / bins as f64,
                grid.counts[sb][hb]
            ));
        }
    }
    prepare_dir(out)?;
    write(out, "case_study.csv", &csv)?;
    write_json(
        out,
        "case_study.json",
        &CaseStudyDocument {
            config: cfg,
            seed: cfg.resolved_seed(),
            methods: [va.to_string(), vb.to_string()],
            pehe_sqrt: [a.pehe_sqrt, b.pehe_sqrt],
            grid: &grid,
        },
    )?;
    record_config(cfg, out)?;
    println!("{va}: sqrt_pehe={} {vb}: sqrt_pehe={}", a.pehe_sqrt, b.pehe_sqrt);
    Ok(())
}
