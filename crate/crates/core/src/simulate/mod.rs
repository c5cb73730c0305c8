//! Semi-synthetic data: Gaussian covariates, logistic treatments, and
//! potential outcomes with a per-node treatment effect plus a
//! hyperedge-aggregated spillover term.
//!
//! ```text
//! y_i = w₀·x_i + γ f_t(t_i, x_i) + β f_s(i) + ε_i
//! ```

mod io;

pub use io::{load_dataset, load_tabular_dataset, save_dataset, TabularData, DATASET_FILES};

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{Hypergraph, HypergraphError};
use crate::numerics::{sigmoid, Tensor};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{what}: expected {expected} rows, found {found}")]
    RowCountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Hypergraph(#[from] HypergraphError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Independent substreams of one seed.
pub mod streams {
    pub const COVARIATES: u64 = 1;
    pub const WEIGHTS: u64 = 2;
    pub const TREATMENTS: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const HYPERGRAPH: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const INIT: u64 = 7;
}

/// ChaCha8 keyed by `seed`, positioned on stream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    Linear,
    Quadratic,
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Setting::Linear),
            "quadratic" => Ok(Setting::Quadratic),
            other => Err(format!("unknown setting `{other}`")),
        }
    }
}

/// Nonlinearity applied to each hyperedge's aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPrime {
    #[default]
    Identity,
}

impl SigmaPrime {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            SigmaPrime::Identity => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub setting: Setting,
    pub d: usize,
    pub beta: f64,
    pub gamma: f64,
    pub noise_scale: f64,
    pub eps_t_scale: f64,
    pub seed: u64,
    pub sigma_prime: SigmaPrime,
    /// Leave node `i` out of its own hyperedge aggregates.
    pub exclude_self: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Linear,
            d: 50,
            beta: 1.0,
            gamma: 1.0,
            noise_scale: 1.0,
            eps_t_scale: 1.0,
            seed: 0,
            sigma_prime: SigmaPrime::Identity,
            exclude_self: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::InvalidConfig(m.into()));
        if self.d == 0 {
            return bad("d must be >= 1");
        }
        if !self.beta.is_finite() || !self.gamma.is_finite() {
            return bad("beta and gamma must be finite");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad("noise_scale must be >= 0");
        }
        if !(self.eps_t_scale >= 0.0) || !self.eps_t_scale.is_finite() {
            return bad("eps_t_scale must be >= 0");
        }
        Ok(())
    }
}

/// Outcome- and treatment-model coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SimWeights {
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
    /// d×d, used by the quadratic setting.
    pub wt: Tensor,
    pub vt: Vec<f64>,
}

impl SimWeights {
    /// `w0, w1, vt ~ N(0, 1)`, `Wt ~ N(0, 1/d)`.
    pub fn draw(d: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::WEIGHTS);
        let vec = |rng: &mut ChaCha8Rng| (0..d).map(|_| normal(rng)).collect::<Vec<_>>();
        let w0 = vec(&mut rng);
        let w1 = vec(&mut rng);
        let vt = vec(&mut rng);
        let s = 1.0 / (d as f64).sqrt();
        let wt = Tensor::from_fn(d, d, |_, _| s * normal(&mut rng));
        Self { w0, w1, wt, vt }
    }

    pub fn dim(&self) -> usize {
        self.w0.len()
    }

    fn check(&self, d: usize) -> Result<(), SimulateError> {
        if self.w0.len() != d || self.w1.len() != d || self.vt.len() != d || self.wt.shape() != (d, d) {
            return Err(SimulateError::ShapeMismatch(format!("weights do not match d = {d}")));
        }
        Ok(())
    }
}

/// Per-node noise: `eps_t` inside the treated branch, `eps_y` on the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps_t: Vec<f64>,
    pub eps_y: Vec<f64>,
}

impl NoiseDraw {
    pub fn draw(n: usize, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        let eps_t = (0..n).map(|_| cfg.eps_t_scale * normal(rng)).collect();
        let eps_y = (0..n).map(|_| cfg.noise_scale * normal(rng)).collect();
        Self { eps_t, eps_y }
    }

    pub fn zero(n: usize) -> Self {
        Self {
            eps_t: vec![0.0; n],
            eps_y: vec![0.0; n],
        }
    }
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub h: Hypergraph,
    pub x: Tensor,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub tau: Vec<f64>,
    pub delta: Vec<f64>,
    pub weights: SimWeights,
    pub config: SimConfig,
}

impl SimDataset {
    pub fn num_nodes(&self) -> usize {
        self.t.len()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.t.iter().sum::<f64>() / self.t.len() as f64
    }

    /// Same data seen through a different hypergraph (outcomes untouched).
    pub fn with_hypergraph(&self, h: Hypergraph) -> Result<Self, SimulateError> {
        if h.num_nodes() != self.num_nodes() {
            return Err(SimulateError::ShapeMismatch(format!(
                "{} nodes in hypergraph, {} in dataset",
                h.num_nodes(),
                self.num_nodes()
            )));
        }
        Ok(Self { h, ..self.clone() })
    }
}

/// `n × d` i.i.d. standard normal entries.
pub fn gen_covariates(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, streams::COVARIATES);
    Tensor::from_fn(n, d, |_, _| normal(&mut rng))
}

/// `t_i ~ Bernoulli(sigmoid(x_i · v_t))`.
pub fn gen_treatments(x: &Tensor, vt: &[f64], seed: u64) -> Result<Vec<f64>, SimulateError> {
    if vt.len() != x.cols() {
        return Err(SimulateError::ShapeMismatch(format!(
            "v_t has length {}, X has {} columns",
            vt.len(),
            x.cols()
        )));
    }
    let mut rng = stream_rng(seed, streams::TREATMENTS);
    Ok((0..x.rows())
        .map(|i| {
            let p = sigmoid(dot(x.row(i), vt));
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(w: &Tensor, x: &[f64]) -> f64 {
    (0..x.len()).map(|r| x[r] * dot(w.row(r), x)).sum()
}

/// Individual treatment response: zero when untreated.
pub fn f_t(t: f64, x: &[f64], weights: &SimWeights, setting: Setting, eps_t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    match setting {
        Setting::Linear => dot(&weights.w1, x) + eps_t,
        Setting::Quadratic => quad_form(&weights.wt, x) + eps_t,
    }
}

/// Spillover received by node `i` under treatment vector `t`.
///
/// Each incident hyperedge contributes `σ'` of its normalized treated
/// aggregate; contributions are averaged over the node's hyperedges.
pub fn f_s(i: usize, t: &[f64], x: &Tensor, h: &Hypergraph, weights: &SimWeights, cfg: &SimConfig) -> f64 {
    let edges = h.node_edges(i);
    if edges.is_empty() {
        return 0.0;
    }
    let d = x.cols();
    let mut total = 0.0;
    for &e in edges {
        let members = h.edge(e).iter().copied().filter(|&j| !(cfg.exclude_self && j == i));
        let z = if cfg.exclude_self { h.edge(e).len() - 1 } else { h.edge(e).len() } as f64;
        let agg = match cfg.setting {
            Setting::Linear => {
                let s: f64 = members.map(|j| t[j] * f_t(t[j], x.row(j), weights, cfg.setting, 0.0)).sum();
                s / z
            }
            Setting::Quadratic => {
                let mut s = vec![0.0; d];
                for j in members {
                    if t[j] != 0.0 {
                        for (acc, v) in s.iter_mut().zip(x.row(j)) {
                            *acc += t[j] * v;
                        }
                    }
                }
                quad_form(&weights.wt, &s) / (z * z)
            }
        };
        total += cfg.sigma_prime.apply(agg);
    }
    total / edges.len() as f64
}

fn check_shapes(h: &Hypergraph, x: &Tensor, t: &[f64], cfg: &SimConfig) -> Result<(), SimulateError> {
    if x.rows() != h.num_nodes() || t.len() != h.num_nodes() {
        return Err(SimulateError::ShapeMismatch(format!(
            "{} covariate rows, {} treatments, {} nodes",
            x.rows(),
            t.len(),
            h.num_nodes()
        )));
    }
    if x.cols() != cfg.d {
        return Err(SimulateError::ShapeMismatch(format!(
            "{} covariate columns, config d = {}",
            x.cols(),
            cfg.d
        )));
    }
    if t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(SimulateError::ShapeMismatch("treatments must be 0/1".into()));
    }
    Ok(())
}

/// Potential outcomes for both values of each node's own treatment, other
/// nodes held at `t`, from weights and noise supplied by the caller.
pub fn potential_outcomes(
    h: &Hypergraph,
    x: &Tensor,
    t: &[f64],
    weights: &SimWeights,
    noise: &NoiseDraw,
    cfg: &SimConfig,
) -> Result<(Vec<f64>, Vec<f64>), SimulateError> {
    cfg.validate()?;
    check_shapes(h, x, t, cfg)?;
    weights.check(cfg.d)?;
    let n = h.num_nodes();
    if noise.eps_t.len() != n || noise.eps_y.len() != n {
        return Err(SimulateError::ShapeMismatch("noise draw length".into()));
    }

    let spill = spillover_terms(h, x, t, weights, cfg);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.row(i);
        let base = dot(&weights.w0, xi) + noise.eps_y[i];
        let own = cfg.gamma * f_t(1.0, xi, weights, cfg.setting, noise.eps_t[i]);
        y1.push(base + own + cfg.beta * spill.treated[i]);
        y0.push(base + cfg.beta * spill.control[i]);
    }
    Ok((y1, y0))
}

struct Spill {
    treated: Vec<f64>,
    control: Vec<f64>,
}

// f_s for every node with its own treatment set to 1 and to 0, sharing the
// per-edge treated aggregates.
fn spillover_terms(h: &Hypergraph, x: &Tensor, t: &[f64], weights: &SimWeights, cfg: &SimConfig) -> Spill {
    let n = h.num_nodes();
    let d = x.cols();
    let if_treated: Vec<f64> = (0..n)
        .map(|j| match cfg.setting {
            Setting::Linear => f_t(1.0, x.row(j), weights, cfg.setting, 0.0),
            Setting::Quadratic => 0.0,
        })
        .collect();
    let mut edge_lin = vec![0.0; h.num_edges()];
    let mut edge_vec = Tensor::zeros(h.num_edges(), if cfg.setting == Setting::Quadratic { d } else { 0 });
    for e in 0..h.num_edges() {
        for &j in h.edge(e) {
            if t[j] == 0.0 {
                continue;
            }
            match cfg.setting {
                Setting::Linear => edge_lin[e] += if_treated[j],
                Setting::Quadratic => {
                    for (acc, v) in edge_vec.row_mut(e).iter_mut().zip(x.row(j)) {
                        *acc += v;
                    }
                }
            }
        }
    }

    let mut treated = vec![0.0; n];
    let mut control = vec![0.0; n];
    let mut s = vec![0.0; d];
    for i in 0..n {
        let edges = h.node_edges(i);
        if edges.is_empty() {
            continue;
        }
        for (own, out) in [(1.0, &mut treated), (0.0, &mut control)] {
            let mut total = 0.0;
            for &e in edges {
                let size = h.edge(e).len();
                // aggregate over members other than i, then add i back if included
                let own_in = if cfg.exclude_self { 0.0 } else { own };
                let z = if cfg.exclude_self { size - 1 } else { size } as f64;
                let agg = match cfg.setting {
                    Setting::Linear => {
                        let others = edge_lin[e] - t[i] * if_treated[i];
                        (others + own_in * if_treated[i]) / z
                    }
                    Setting::Quadratic => {
                        let xi = x.row(i);
                        for k in 0..d {
                            s[k] = edge_vec.get(e, k) + (own_in - t[i]) * xi[k];
                        }
                        quad_form(&weights.wt, &s) / (z * z)
                    }
                };
                total += cfg.sigma_prime.apply(agg);
            }
            out[i] = total / edges.len() as f64;
        }
    }
    Spill { treated, control }
}

/// Noise-free treatment effect `γ·f_t(1, x_i)`; independent of `T` and `H`.
pub fn true_ite(x: &Tensor, weights: &SimWeights, cfg: &SimConfig) -> Result<Vec<f64>, SimulateError> {
    if x.cols() != cfg.d {
        return Err(SimulateError::ShapeMismatch(format!("{} columns, d = {}", x.cols(), cfg.d)));
    }
    weights.check(cfg.d)?;
    Ok((0..x.rows())
        .map(|i| cfg.gamma * f_t(1.0, x.row(i), weights, cfg.setting, 0.0))
        .collect())
}

/// `δ_i = β·[f_s(i; T) − f_s(i; T with every other node untreated)]`.
pub fn true_spillover(
    i: usize,
    h: &Hypergraph,
    x: &Tensor,
    t: &[f64],
    weights: &SimWeights,
    cfg: &SimConfig,
) -> Result<f64, SimulateError> {
    check_shapes(h, x, t, cfg)?;
    if i >= h.num_nodes() {
        return Err(SimulateError::ShapeMismatch(format!("node {i} out of range")));
    }
    let observed = f_s(i, t, x, h, weights, cfg);
    let baseline = if cfg.exclude_self {
        0.0
    } else {
        let mut alone = vec![0.0; t.len()];
        alone[i] = t[i];
        f_s(i, &alone, x, h, weights, cfg)
    };
    Ok(cfg.beta * (observed - baseline))
}

/// Layers simulated outcomes onto given structure, covariates and
/// treatments. Weights and noise come from `cfg.seed`.
pub fn simulate_outcomes(h: &Hypergraph, x: &Tensor, t: &[f64], cfg: &SimConfig) -> Result<SimDataset, SimulateError> {
    let weights = SimWeights::draw(cfg.d, cfg.seed);
    simulate_outcomes_with(h, x, t, weights, cfg)
}

/// As [`simulate_outcomes`] with explicit weights.
pub fn simulate_outcomes_with(
    h: &Hypergraph,
    x: &Tensor,
    t: &[f64],
    weights: SimWeights,
    cfg: &SimConfig,
) -> Result<SimDataset, SimulateError> {
    cfg.validate()?;
    check_shapes(h, x, t, cfg)?;
    let n = h.num_nodes();
    let noise = NoiseDraw::draw(n, cfg, &mut stream_rng(cfg.seed, streams::NOISE));
    let (y1, y0) = potential_outcomes(h, x, t, &weights, &noise, cfg)?;
    let y = (0..n).map(|i| if t[i] == 1.0 { y1[i] } else { y0[i] }).collect();
    let tau = true_ite(x, &weights, cfg)?;
    let delta = (0..n)
        .map(|i| true_spillover(i, h, x, t, &weights, cfg))
        .collect::<Result<_, _>>()?;
    Ok(SimDataset {
        h: h.clone(),
        x: x.clone(),
        t: t.to_vec(),
        y,
        y1,
        y0,
        tau,
        delta,
        weights,
        config: *cfg,
    })
}

/// Full pipeline on a given hypergraph: covariates, treatments, outcomes.
pub fn generate_on(h: &Hypergraph, cfg: &SimConfig) -> Result<SimDataset, SimulateError> {
    cfg.validate()?;
    let x = gen_covariates(h.num_nodes(), cfg.d, cfg.seed);
    let weights = SimWeights::draw(cfg.d, cfg.seed);
    let t = gen_treatments(&x, &weights.vt, cfg.seed)?;
    simulate_outcomes_with(h, &x, &t, weights, cfg)
}

/// Random hypergraph shaped like a small contact network: `m` hyperedges
/// with sizes uniform in `min_size..=max_size` and uniformly drawn members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactStyle {
    pub n: usize,
    pub m: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for ContactStyle {
    fn default() -> Self {
        Self {
            n: 327,
            m: 800,
            min_size: 2,
            max_size: 8,
        }
    }
}

impl ContactStyle {
    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.n {
            return Err(SimulateError::InvalidConfig(format!(
                "hyperedge sizes {}..={} for {} nodes",
                self.min_size, self.max_size, self.n
            )));
        }
        if self.m == 0 {
            return Err(SimulateError::InvalidConfig("m must be >= 1".into()));
        }
        Ok(())
    }

    /// Draws the hypergraph for `seed`; duplicate hyperedges are redrawn.
    pub fn hypergraph(&self, seed: u64) -> Result<Hypergraph, SimulateError> {
        self.validate()?;
        let mut rng = stream_rng(seed, streams::HYPERGRAPH);
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(self.m);
        let mut attempts = 0usize;
        while edges.len() < self.m {
            attempts += 1;
            if attempts > 100 * self.m {
                return Err(SimulateError::InvalidConfig(format!(
                    "cannot draw {} distinct hyperedges",
                    self.m
                )));
            }
            let k = rng.random_range(self.min_size..=self.max_size);
            let mut members = sample(&mut rng, self.n, k).into_vec();
            members.sort_unstable();
            if seen.insert(members.clone()) {
                edges.push(members);
            }
        }
        Ok(Hypergraph::new(self.n, &edges)?)
    }

    pub fn generate(&self, cfg: &SimConfig) -> Result<SimDataset, SimulateError> {
        let h = self.hypergraph(cfg.seed)?;
        generate_on(&h, cfg)
    }
}
