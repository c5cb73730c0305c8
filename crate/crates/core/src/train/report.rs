use serde::Serialize;

use super::{Comparison, EpochLoss, MetricsReport, RunResult, TrainConfig};

pub const COMPARISON_HEADER: &str = "method,param,seed,pehe_sqrt,ate_err";

fn param_field(p: Option<f64>) -> String {
    p.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-run rows under [`COMPARISON_HEADER`].
pub fn comparison_csv<'a>(runs: impl IntoIterator<Item = &'a RunResult>) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            param_field(r.param),
            r.seed,
            r.pehe_sqrt,
            r.ate_err
        ));
    }
    out
}

/// Mean and standard error per method (and grid value).
pub fn summary_csv<'a>(comparisons: impl IntoIterator<Item = &'a Comparison>) -> String {
    let mut out = String::from("method,param,runs,pehe_mean,pehe_stderr,ate_mean,ate_stderr\n");
    for c in comparisons {
        for s in &c.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.method,
                param_field(s.param),
                s.runs,
                s.pehe_mean,
                s.pehe_stderr,
                s.ate_mean,
                s.ate_stderr
            ));
        }
    }
    out
}

pub fn loss_history_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,factual,balance,total,val_mse\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.factual, e.balance, e.total, e.val_mse
        ));
    }
    out
}

/// The per-run JSON document.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsDocument<'a, C: Serialize> {
    pub config: &'a C,
    pub seed: u64,
    pub metrics: Metrics,
    pub loss_history: &'a [EpochLoss],
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Metrics {
    pub pehe_sqrt: f64,
    pub ate_err: f64,
    pub alpha_effective: f64,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl<'a, C: Serialize> MetricsDocument<'a, C> {
    pub fn new(config: &'a C, train: &TrainConfig, report: &'a MetricsReport) -> Self {
        Self {
            config,
            seed: train.seed,
            metrics: Metrics {
                pehe_sqrt: report.pehe_sqrt,
                ate_err: report.ate_err,
                alpha_effective: report.alpha_effective,
                best_epoch: report.best_epoch,
                best_val_mse: report.best_val_mse,
            },
            loss_history: &report.loss_history,
        }
    }
}
