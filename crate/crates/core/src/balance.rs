//! Distributional discrepancy between treated and control representations.
//!
//! The discrepancy is an entropic optimal-transport estimate of the
//! Wasserstein-1 distance: uniform marginals, Euclidean ground cost, and a
//! fixed number of log-domain Sinkhorn iterations. The reported value is the
//! transport cost `⟨π, C⟩` of the final plan, and the reverse pass
//! differentiates through every unrolled iteration, so gradients are exact
//! for the value actually computed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("empty group: {0}")]
    EmptyGroup(&'static str),
    #[error("sample sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("all training nodes fall in one treatment group")]
    DegenerateGroups,
    #[error("invalid balance config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 20,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<(), BalanceError> {
        if !(self.sinkhorn_epsilon > 0.0) || !self.sinkhorn_epsilon.is_finite() {
            return Err(BalanceError::InvalidConfig(format!(
                "sinkhorn_epsilon must be positive, got {}",
                self.sinkhorn_epsilon
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(BalanceError::InvalidConfig("sinkhorn_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Euclidean distance matrix `C_ij = ‖a_i − b_j‖`.
pub fn pairwise_distances(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::ShapeMismatch(format!(
            "points of dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(Tensor::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }))
}

struct PairwiseDistOp;

impl CustomOp for PairwiseDistOp {
    fn name(&self) -> &'static str {
        "pairwise_dist"
    }

    fn backward(&self, inputs: &[&Tensor], dist: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let d = a.cols();
        let mut ga = Tensor::zeros(a.rows(), d);
        let mut gb = Tensor::zeros(b.rows(), d);
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let c = dist.get(i, j);
                if c == 0.0 {
                    continue;
                }
                let w = g.get(i, j) / c;
                if w == 0.0 {
                    continue;
                }
                let (ai, bj) = (a.row(i), b.row(j));
                if needs[0] {
                    for ((o, x), y) in ga.row_mut(i).iter_mut().zip(ai).zip(bj) {
                        *o += w * (x - y);
                    }
                }
                if needs[1] {
                    for ((o, x), y) in gb.row_mut(j).iter_mut().zip(ai).zip(bj) {
                        *o -= w * (x - y);
                    }
                }
            }
        }
        vec![needs[0].then_some(ga), needs[1].then_some(gb)]
    }
}

/// Records the distance matrix between the rows of `a` and `b`.
pub fn pairwise_distances_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var, NumericsError> {
    let out = pairwise_distances(tape.value(a), tape.value(b))?;
    Ok(tape.custom(Box::new(PairwiseDistOp), &[a, b], out))
}

/// Forward trace of the unrolled iterations, kept for the reverse pass.
struct SinkhornTrace {
    // softmax weights of each f-update (rows) and g-update (columns), k1*k2 each
    row_soft: Vec<Vec<f64>>,
    col_soft: Vec<Vec<f64>>,
    plan: Vec<f64>,
    value: f64,
}

fn sinkhorn_forward(cost: &Tensor, eps: f64, iters: usize) -> SinkhornTrace {
    let (k1, k2) = cost.shape();
    let c = cost.data();
    let la = -(k1 as f64).ln();
    let lb = -(k2 as f64).ln();
    let mut f = vec![0.0; k1];
    let mut g = vec![0.0; k2];
    let mut row_soft = Vec::with_capacity(iters);
    let mut col_soft = Vec::with_capacity(iters);
    let mut buf = vec![0.0; k1 * k2];

    for _ in 0..iters {
        // f_i = ε·log a_i − ε·LSE_j((g_j − C_ij)/ε)
        let mut soft = vec![0.0; k1 * k2];
        for i in 0..k1 {
            let row = &mut buf[i * k2..(i + 1) * k2];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k2 {
                row[j] = (g[j] - c[i * k2 + j]) / eps;
                mx = mx.max(row[j]);
            }
            let mut s = 0.0;
            for j in 0..k2 {
                let e = (row[j] - mx).exp();
                soft[i * k2 + j] = e;
                s += e;
            }
            for v in &mut soft[i * k2..(i + 1) * k2] {
                *v /= s;
            }
            f[i] = eps * la - eps * (mx + s.ln());
        }
        row_soft.push(soft);

        // g_j = ε·log b_j − ε·LSE_i((f_i − C_ij)/ε)
        let mut soft = vec![0.0; k1 * k2];
        let mut mx = vec![f64::NEG_INFINITY; k2];
        for i in 0..k1 {
            for j in 0..k2 {
                let v = (f[i] - c[i * k2 + j]) / eps;
                buf[i * k2 + j] = v;
                mx[j] = mx[j].max(v);
            }
        }
        let mut s = vec![0.0; k2];
        for i in 0..k1 {
            for j in 0..k2 {
                let e = (buf[i * k2 + j] - mx[j]).exp();
                soft[i * k2 + j] = e;
                s[j] += e;
            }
        }
        for i in 0..k1 {
            for j in 0..k2 {
                soft[i * k2 + j] /= s[j];
            }
        }
        for j in 0..k2 {
            g[j] = eps * lb - eps * (mx[j] + s[j].ln());
        }
        col_soft.push(soft);
    }

    // after the last g-update the column marginals are exact: π_ij = b_j·q_ij
    let last = col_soft.last().expect("at least one iteration");
    let b = 1.0 / k2 as f64;
    let plan: Vec<f64> = last.iter().map(|q| b * q).collect();
    let value = plan.iter().zip(c).map(|(p, c)| p * c).sum();
    SinkhornTrace {
        row_soft,
        col_soft,
        plan,
        value,
    }
}

/// Gradient of `⟨π, C⟩` with respect to `C` through the unrolled updates.
fn sinkhorn_backward(cost: &Tensor, trace: &SinkhornTrace, eps: f64) -> Tensor {
    let (k1, k2) = cost.shape();
    let c = cost.data();
    let mut gc = vec![0.0; k1 * k2];
    let mut fbar = vec![0.0; k1];
    let mut gbar = vec![0.0; k2];

    // W = Σ π_ij C_ij with π_ij = exp((f_i + g_j − C_ij)/ε)
    for i in 0..k1 {
        for j in 0..k2 {
            let k = i * k2 + j;
            let p = trace.plan[k];
            let hbar = c[k] * p / eps;
            gc[k] += p - hbar;
            fbar[i] += hbar;
            gbar[j] += hbar;
        }
    }

    for t in (0..trace.col_soft.len()).rev() {
        // g_j = ε·lb − ε·LSE_i((f_i − C_ij)/ε): ∂g_j/∂f_i = −q_ij, ∂g_j/∂C_ij = q_ij
        let q = &trace.col_soft[t];
        for i in 0..k1 {
            let mut acc = 0.0;
            for j in 0..k2 {
                let k = i * k2 + j;
                let w = gbar[j] * q[k];
                gc[k] += w;
                acc += w;
            }
            fbar[i] -= acc;
        }
        // f_i = ε·la − ε·LSE_j((g_j − C_ij)/ε): ∂f_i/∂g_j = −r_ij, ∂f_i/∂C_ij = r_ij
        let r = &trace.row_soft[t];
        gbar.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..k1 {
            for j in 0..k2 {
                let k = i * k2 + j;
                let w = fbar[i] * r[k];
                gc[k] += w;
                gbar[j] -= w;
            }
        }
        fbar.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::from_vec(k1, k2, gc).expect("shape preserved")
}

struct SinkhornOp {
    eps: f64,
    trace: SinkhornTrace,
}

impl CustomOp for SinkhornOp {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        vec![Some(sinkhorn_backward(inputs[0], &self.trace, self.eps).scale(g.item()))]
    }
}

/// Entropic transport cost for a precomputed cost matrix, recorded on the tape.
pub fn sinkhorn_cost_var(tape: &mut Tape, cost: Var, cfg: &BalanceConfig) -> Result<Var, BalanceError> {
    cfg.validate()?;
    let c = tape.value(cost);
    if c.rows() == 0 || c.cols() == 0 {
        return Err(BalanceError::EmptyGroup("cost matrix has no rows or columns"));
    }
    let trace = sinkhorn_forward(c, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters);
    let value = Tensor::scalar(trace.value);
    Ok(tape.custom(
        Box::new(SinkhornOp {
            eps: cfg.sinkhorn_epsilon,
            trace,
        }),
        &[cost],
        value,
    ))
}

/// Whether `(a, b)` is already in canonical order: more rows first, ties
/// broken by comparing the raw values. Evaluating in canonical order makes
/// the estimate exactly symmetric in its arguments.
fn canonical_order(a: &Tensor, b: &Tensor) -> bool {
    if a.rows() != b.rows() {
        return a.rows() > b.rows();
    }
    for (x, y) in a.data().iter().zip(b.data()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o == std::cmp::Ordering::Greater,
        }
    }
    true
}

/// Differentiable Wasserstein-1 estimate between the rows of `a` and `b`.
pub fn wasserstein_sinkhorn_var(tape: &mut Tape, a: Var, b: Var, cfg: &BalanceConfig) -> Result<Var, BalanceError> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.rows() == 0 {
        return Err(BalanceError::EmptyGroup("first sample set"));
    }
    if tb.rows() == 0 {
        return Err(BalanceError::EmptyGroup("second sample set"));
    }
    let (x, y) = if canonical_order(ta, tb) { (a, b) } else { (b, a) };
    let cost = pairwise_distances_var(tape, x, y)?;
    sinkhorn_cost_var(tape, cost, cfg)
}

/// Wasserstein-1 estimate between two point clouds (rows are samples).
pub fn wasserstein_sinkhorn(a: &Tensor, b: &Tensor, cfg: &BalanceConfig) -> Result<f64, BalanceError> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let w = wasserstein_sinkhorn_var(&mut tape, va, vb, cfg)?;
    Ok(tape.value(w).item())
}

/// Exact empirical W₁ between equal-size scalar samples via sorted coupling.
pub fn wasserstein_1d_exact(a: &[f64], b: &[f64]) -> Result<f64, BalanceError> {
    if a.len() != b.len() {
        return Err(BalanceError::SizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(BalanceError::EmptyGroup("no samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Row indices of treated and control nodes among `ids`.
pub fn split_groups(treatments: &[f64], ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    ids.iter().partition(|&&i| treatments[i] > 0.5)
}

/// `W(Z_treated, Z_control) + W(P_treated, P_control)` over the rows `ids`.
pub fn balancing_loss_var(
    tape: &mut Tape,
    z: Var,
    p: Var,
    treatments: &[f64],
    ids: &[usize],
    cfg: &BalanceConfig,
) -> Result<Var, BalanceError> {
    let (treated, control) = split_groups(treatments, ids);
    if treated.is_empty() || control.is_empty() {
        return Err(BalanceError::DegenerateGroups);
    }
    let treated: Arc<[usize]> = treated.into();
    let control: Arc<[usize]> = control.into();
    let mut total = None;
    for rep in [z, p] {
        let a = tape.gather_rows(rep, treated.clone())?;
        let b = tape.gather_rows(rep, control.clone())?;
        let w = wasserstein_sinkhorn_var(tape, a, b, cfg)?;
        total = Some(match total {
            None => w,
            Some(t) => tape.add(t, w)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Value-only version of [`balancing_loss_var`] over all rows.
pub fn balancing_loss(z: &Tensor, p: &Tensor, treatments: &[f64], cfg: &BalanceConfig) -> Result<f64, BalanceError> {
    let ids: Vec<usize> = (0..treatments.len()).collect();
    let mut tape = Tape::new();
    let vz = tape.constant(z.clone());
    let vp = tape.constant(p.clone());
    let l = balancing_loss_var(&mut tape, vz, vp, treatments, &ids, cfg)?;
    Ok(tape.value(l).item())
}
