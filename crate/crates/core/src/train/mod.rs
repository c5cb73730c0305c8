//! Loss assembly, the transductive training loop, effect metrics, and the
//! experiment protocols built on them.

mod baseline;
mod experiment;
mod report;

pub use baseline::{least_squares_effect, LeastSquaresFit};
pub use experiment::{
    case_study_grid, run_comparison, run_method, sweep, CaseStudyGrid, Comparison, Experiment, Method, MethodSummary,
    RunResult, SweepKind, SweepPoint,
};
pub use report::{comparison_csv, loss_history_csv, summary_csv, MetricsDocument, COMPARISON_HEADER};

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{balancing_loss_var, BalanceConfig, BalanceError};
use crate::model::{forward_on_tape, BoundParams, ForwardVars, Interference, ModelConfig, ModelError, ModelParams, Variant};
use crate::numerics::{AdamState, NumericsError, Tape, Tensor, Var};
use crate::simulate::{stream_rng, streams, SimDataset, SimulateError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("loss diverged at epoch {epoch}: {detail}")]
    DivergenceDetected { epoch: usize, detail: String },
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("least squares: {0}")]
    LeastSquares(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    pub variant: Variant,
    pub attention_heads: usize,
    pub conv_layers: usize,
    pub d_z: usize,
    pub d_p: usize,
    pub encoder_layers: usize,
    pub head_layers: usize,
    pub counterfactual_interference: bool,
    pub balance: BalanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            lambda: 0.01,
            lr: 1e-3,
            epochs: 500,
            split_ratios: [0.6, 0.2, 0.2],
            seed: 0,
            variant: Variant::Full,
            attention_heads: 1,
            conv_layers: 1,
            d_z: 64,
            d_p: 64,
            encoder_layers: 2,
            head_layers: 2,
            counterfactual_interference: false,
            balance: BalanceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.split_ratios.iter().any(|&r| !(r > 0.0)) {
            return bad(format!("split ratios must be positive: {:?}", self.split_ratios));
        }
        let total: f64 = self.split_ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios sum to {total}, not 1"));
        }
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) || !self.alpha.is_finite() || !self.lambda.is_finite() {
            return bad("alpha and lambda must be finite and >= 0".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        self.balance.validate()?;
        Ok(())
    }

    /// Balancing weight actually applied: zero for the no-balance ablation.
    pub fn alpha_effective(&self) -> f64 {
        if self.variant.uses_balance() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn model_config(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_z: self.d_z,
            d_p: self.d_p,
            d_attn: self.d_z,
            encoder_layers: self.encoder_layers,
            head_layers: self.head_layers,
            conv_layers: self.conv_layers,
            attention_heads: self.attention_heads,
            variant: self.variant,
            counterfactual_interference: self.counterfactual_interference,
        }
    }
}

/// Train / validation / test node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut by rounded ratios; the test split takes the
/// remainder.
pub fn split_nodes(n: usize, ratios: [f64; 3], seed: u64) -> Split {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream_rng(seed, streams::SPLIT));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Split { train: ids, val, test }
}

/// `(√ε_PEHE, ε_ATE)`.
pub fn metrics(tau_hat: &[f64], tau: &[f64]) -> Result<(f64, f64), TrainError> {
    if tau_hat.len() != tau.len() || tau.is_empty() {
        return Err(TrainError::SizeMismatch(tau_hat.len(), tau.len()));
    }
    let n = tau.len() as f64;
    let pehe = (tau.iter().zip(tau_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    let ate = (tau.iter().sum::<f64>() / n - tau_hat.iter().sum::<f64>() / n).abs();
    Ok((pehe, ate))
}

/// Metrics restricted to `ids`.
pub fn metrics_on(tau_hat: &[f64], tau: &[f64], ids: &[usize]) -> Result<(f64, f64), TrainError> {
    if tau_hat.len() != tau.len() {
        return Err(TrainError::SizeMismatch(tau_hat.len(), tau.len()));
    }
    let a: Vec<f64> = ids.iter().map(|&i| tau_hat[i]).collect();
    let b: Vec<f64> = ids.iter().map(|&i| tau[i]).collect();
    metrics(&a, &b)
}

/// One epoch's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub factual: f64,
    pub balance: f64,
    pub total: f64,
    pub val_mse: f64,
}

/// Tape handles of the assembled loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub factual: Var,
    pub balance: Option<Var>,
    pub l2: Option<Var>,
}

/// Records `Σ_train (y − ŷ)² + α·L_b + λ·‖Θ‖²` on the tape.
///
/// `L_b` is skipped when α is zero or the training split holds a single
/// treatment group.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var(
    tape: &mut Tape,
    bound: &BoundParams,
    fv: &ForwardVars,
    y: &[f64],
    t: &[f64],
    train_ids: &Arc<[usize]>,
    alpha: f64,
    lambda: f64,
    balance: &BalanceConfig,
) -> Result<LossVars, TrainError> {
    if train_ids.is_empty() {
        return Err(TrainError::InvalidConfig("empty training split".into()));
    }
    let y1 = tape.gather_rows(fv.yhat1, train_ids.clone())?;
    let y0 = tape.gather_rows(fv.yhat0, train_ids.clone())?;
    let tt: Arc<[f64]> = train_ids.iter().map(|&i| t[i]).collect();
    let tc: Arc<[f64]> = tt.iter().map(|v| 1.0 - v).collect();
    let a = tape.scale_rows(y1, tt)?;
    let b = tape.scale_rows(y0, tc)?;
    let yhat = tape.add(a, b)?;
    let target = tape.constant(Tensor::column(train_ids.iter().map(|&i| y[i]).collect()));
    let resid = tape.sub(yhat, target)?;
    let factual = tape.sum_squares(resid);
    let mut total = factual;

    let balance = if alpha > 0.0 {
        match balancing_loss_var(tape, fv.z, fv.p, t, train_ids, balance) {
            Ok(lb) => {
                let scaled = tape.scale(lb, alpha);
                total = tape.add(total, scaled)?;
                Some(lb)
            }
            Err(BalanceError::DegenerateGroups) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };

    let l2 = if lambda > 0.0 {
        bound.l2_penalty(tape)?.map(|l2| -> Result<Var, TrainError> {
            let scaled = tape.scale(l2, lambda);
            total = tape.add(total, scaled)?;
            Ok(l2)
        })
    } else {
        None
    }
    .transpose()?;

    Ok(LossVars {
        total,
        factual,
        balance,
        l2,
    })
}

/// Value of the training loss for given parameters.
pub fn total_loss(
    data: &SimDataset,
    params: &ModelParams,
    train_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let structure = Interference::build(&data.h, params.config().variant);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let t: Arc<[f64]> = data.t.as_slice().into();
    let fv = forward_on_tape(&mut tape, &bound, &data.x, &t, &structure)?;
    let ids: Arc<[usize]> = train_ids.into();
    let lv = total_loss_var(
        &mut tape,
        &bound,
        &fv,
        &data.y,
        &data.t,
        &ids,
        cfg.alpha_effective(),
        cfg.lambda,
        &cfg.balance,
    )?;
    let v = tape.value(lv.total).item();
    if !v.is_finite() {
        return Err(TrainError::NonFiniteValue(format!("loss = {v}")));
    }
    Ok(v)
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pehe_sqrt: f64,
    pub ate_err: f64,
    pub seed: u64,
    pub variant: Variant,
    pub alpha_effective: f64,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub loss_history: Vec<EpochLoss>,
    pub tau_hat: Vec<f64>,
    pub split: Split,
}

fn observed_mse(yhat1: &[f64], yhat0: &[f64], data: &SimDataset, ids: &[usize]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter()
        .map(|&i| {
            let p = if data.t[i] == 1.0 { yhat1[i] } else { yhat0[i] };
            (p - data.y[i]).powi(2)
        })
        .sum::<f64>()
        / ids.len() as f64
}

/// Full-batch Adam on the training split. Keeps the parameters with the
/// lowest validation factual MSE and reports effect metrics on the test
/// split.
pub fn train(data: &SimDataset, cfg: &TrainConfig) -> Result<(ModelParams, MetricsReport), TrainError> {
    let split = split_nodes(data.num_nodes(), cfg.split_ratios, cfg.seed);
    train_with_split(data, cfg, split)
}

pub fn train_with_split(
    data: &SimDataset,
    cfg: &TrainConfig,
    split: Split,
) -> Result<(ModelParams, MetricsReport), TrainError> {
    cfg.validate()?;
    let n = data.num_nodes();
    if data.y.len() != n || data.tau.len() != n || data.x.rows() != n || data.h.num_nodes() != n {
        return Err(TrainError::SizeMismatch(data.y.len(), n));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "{} nodes leave an empty train or test split",
            n
        )));
    }
    let alpha = cfg.alpha_effective();
    let treated = split.train.iter().filter(|&&i| data.t[i] == 1.0).count();
    if alpha > 0.0 && (treated == 0 || treated == split.train.len()) {
        warn!("training split holds a single treatment group; balancing term disabled");
    }

    let mut params = ModelParams::init(cfg.model_config(data.x.cols()), cfg.seed)?;
    let structure = Interference::build(&data.h, cfg.variant);
    let t: Arc<[f64]> = data.t.as_slice().into();
    let train_ids: Arc<[usize]> = split.train.as_slice().into();
    let mut adam = AdamState::new(params.store(), cfg.lr);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let fv = forward_on_tape(&mut tape, &bound, &data.x, &t, &structure)?;
        let lv = total_loss_var(
            &mut tape,
            &bound,
            &fv,
            &data.y,
            &data.t,
            &train_ids,
            alpha,
            cfg.lambda,
            &cfg.balance,
        )?;
        let total = tape.value(lv.total).item();
        if !total.is_finite() {
            return Err(TrainError::DivergenceDetected {
                epoch,
                detail: format!("loss = {total}"),
            });
        }
        let val_mse = observed_mse(
            tape.value(fv.yhat1).data(),
            tape.value(fv.yhat0).data(),
            data,
            &split.val,
        );
        history.push(EpochLoss {
            epoch,
            factual: tape.value(lv.factual).item(),
            balance: lv.balance.map_or(0.0, |b| tape.value(b).item()),
            total,
            val_mse,
        });
        if val_mse < best_val || epoch == 0 {
            best_val = val_mse;
            best_epoch = epoch;
            best.assign(&params)?;
        }

        let grads = match tape.backward(lv.total) {
            Ok(g) => g.param_grads(params.store()),
            Err(NumericsError::NonFiniteValue(d)) => {
                return Err(TrainError::DivergenceDetected { epoch, detail: d });
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            return Err(TrainError::DivergenceDetected {
                epoch,
                detail: format!("non-finite gradient for {}", params.store().name(crate::numerics::ParamId(bad))),
            });
        }
        drop(bound);
        adam.step(params.store_mut(), &grads)?;
    }

    let out = crate::model::forward_with(&data.x, &data.t, &structure, &best)?;
    let tau_hat = crate::model::estimate_ite(&out);
    let (pehe_sqrt, ate_err) = metrics_on(&tau_hat, &data.tau, &split.test)?;
    let report = MetricsReport {
        pehe_sqrt,
        ate_err,
        seed: cfg.seed,
        variant: cfg.variant,
        alpha_effective: alpha,
        best_epoch,
        best_val_mse: best_val,
        loss_history: history,
        tau_hat,
        split,
    };
    Ok((best, report))
}
