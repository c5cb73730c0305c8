//! The estimator network and its ablations.
//!
//! A forward pass encodes covariates into confounder representations `Z`,
//! masks them by treatment, propagates them over the interference structure
//! to get interference representations `P`, and feeds `[Z ∥ P]` into two
//! outcome heads, one per treatment arm.

mod checkpoint;
pub mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{Hypergraph, SparseMatrix};
use crate::numerics::{Activation, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which interference module the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Attention-weighted hypergraph convolution on the original hypergraph.
    #[default]
    Full,
    /// The same hypergraph machinery run on the clique expansion, each
    /// projected edge read as a two-node hyperedge.
    ProjectedHyper,
    /// Graph convolution on the clique expansion.
    GraphConv,
    /// Full architecture trained without the balancing penalty.
    NoBalance,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::ProjectedHyper,
        Variant::GraphConv,
        Variant::NoBalance,
    ];

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::GraphConv)
    }

    pub fn uses_balance(self) -> bool {
        !matches!(self, Variant::NoBalance)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "hypersci",
            Variant::ProjectedHyper => "hypersci_p",
            Variant::GraphConv => "hypersci_g",
            Variant::NoBalance => "hypersci_nb",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "hypersci" => Ok(Variant::Full),
            "projected_hyper" | "hypersci_p" => Ok(Variant::ProjectedHyper),
            "graph_conv" | "hypersci_g" => Ok(Variant::GraphConv),
            "no_balance" | "nobalance" | "hypersci_nb" => Ok(Variant::NoBalance),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.label().to_string()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_z: usize,
    pub d_p: usize,
    /// Width of the attention projection `W_a`.
    pub d_attn: usize,
    pub encoder_layers: usize,
    pub head_layers: usize,
    pub conv_layers: usize,
    pub attention_heads: usize,
    pub variant: Variant,
    /// Predict each arm with `P` recomputed under that arm's own treatment
    /// instead of sharing the observed `P`. Single convolution layer only.
    pub counterfactual_interference: bool,
}

impl ModelConfig {
    pub fn new(d_in: usize, variant: Variant) -> Self {
        Self {
            d_in,
            d_z: 64,
            d_p: 64,
            d_attn: 64,
            encoder_layers: 2,
            head_layers: 2,
            conv_layers: 1,
            attention_heads: 1,
            variant,
            counterfactual_interference: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.d_in == 0 || self.d_z == 0 || self.d_p == 0 || self.d_attn == 0 {
            return bad("all dimensions must be >= 1");
        }
        if self.encoder_layers == 0 || self.head_layers == 0 || self.conv_layers == 0 {
            return bad("layer counts must be >= 1");
        }
        if self.attention_heads == 0 {
            return bad("attention_heads must be >= 1");
        }
        if self.counterfactual_interference && self.conv_layers != 1 {
            return bad("counterfactual_interference requires conv_layers = 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionHead {
    proj: ParamId,
    vec: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<Dense>,
    attention: Vec<AttentionHead>,
    conv: Vec<ParamId>,
    head1: Vec<Dense>,
    head0: Vec<Dense>,
}

/// All learnable weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
}

fn mlp_dims(d_in: usize, hidden: usize, d_out: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|l| {
            let i = if l == 0 { d_in } else { hidden };
            let o = if l + 1 == layers { d_out } else { hidden };
            (i, o)
        })
        .collect()
}

impl ModelParams {
    /// Fresh parameters: uniform Glorot weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let dense = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dims: Vec<(usize, usize)>| {
            dims.into_iter()
                .enumerate()
                .map(|(l, (i, o))| Dense {
                    weight: store.insert(format!("{prefix}.{l}.weight"), glorot(rng, i, o), true),
                    bias: store.insert(format!("{prefix}.{l}.bias"), Tensor::zeros(1, o), false),
                })
                .collect::<Vec<_>>()
        };

        let encoder = dense(
            &mut store,
            &mut rng,
            "encoder",
            mlp_dims(config.d_in, config.d_z, config.d_z, config.encoder_layers),
        );
        let attention = if config.variant.uses_attention() {
            (0..config.attention_heads)
                .map(|h| AttentionHead {
                    proj: store.insert(
                        format!("attention.{h}.proj"),
                        glorot(&mut rng, config.d_z, config.d_attn),
                        true,
                    ),
                    vec: store.insert(
                        format!("attention.{h}.vec"),
                        glorot(&mut rng, 2 * config.d_attn, 1),
                        true,
                    ),
                })
                .collect()
        } else {
            Vec::new()
        };
        let conv = (0..config.conv_layers)
            .map(|l| {
                let i = if l == 0 { config.d_z } else { config.d_p };
                store.insert(format!("conv.{l}.weight"), glorot(&mut rng, i, config.d_p), true)
            })
            .collect();
        let head_dims = mlp_dims(config.d_z + config.d_p, config.d_z, 1, config.head_layers);
        let head1 = dense(&mut store, &mut rng, "head1", head_dims.clone());
        let head0 = dense(&mut store, &mut rng, "head0", head_dims);

        Ok(Self {
            config,
            store,
            layout: Layout {
                encoder,
                attention,
                conv,
                head1,
                head0,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Sum of squared regularized weights (biases excluded).
    pub fn l2_norm_sq(&self) -> f64 {
        self.store
            .ids()
            .filter(|&id| self.store.is_regularized(id))
            .map(|id| self.store.get(id).sum_squares())
            .sum()
    }

    fn same_layout(&self, other: &ModelParams) -> bool {
        self.config == other.config
    }

    /// Overwrites values from a snapshot of the same architecture.
    pub fn assign(&mut self, other: &ModelParams) -> Result<(), ModelError> {
        if !self.same_layout(other) {
            return Err(ModelError::ShapeMismatch("different architectures".into()));
        }
        self.store.assign(&other.store)?;
        Ok(())
    }
}

/// Precomputed propagation structure for one variant.
#[derive(Debug, Clone)]
pub enum Interference {
    Hyper(Arc<Hypergraph>),
    Graph(Arc<SparseMatrix>),
}

impl Interference {
    pub fn build(h: &Hypergraph, variant: Variant) -> Self {
        match variant {
            Variant::Full | Variant::NoBalance => Interference::Hyper(Arc::new(h.clone())),
            Variant::ProjectedHyper => Interference::Hyper(Arc::new(h.project_clique().as_pair_hypergraph())),
            Variant::GraphConv => Interference::Graph(Arc::new(h.project_clique().gcn_operator())),
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            Interference::Hyper(h) => h.num_nodes(),
            Interference::Graph(a) => a.rows(),
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub z: Var,
    pub p: Var,
    pub yhat1: Var,
    pub yhat0: Var,
    pub attention: Option<Var>,
}

/// Materialized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z: Tensor,
    pub p: Tensor,
    pub yhat1: Vec<f64>,
    pub yhat0: Vec<f64>,
    /// Node-major attention weights per incidence of the propagation hypergraph.
    pub attention: Option<Vec<f64>>,
}

impl ForwardOutput {
    fn from_tape(tape: &Tape, v: &ForwardVars) -> Self {
        Self {
            z: tape.value(v.z).clone(),
            p: tape.value(v.p).clone(),
            yhat1: tape.value(v.yhat1).data().to_vec(),
            yhat0: tape.value(v.yhat0).data().to_vec(),
            attention: v.attention.map(|a| tape.value(a).data().to_vec()),
        }
    }

    /// `ŷ_i = ŷ^{t_i}_i`.
    pub fn observed_prediction(&self, treatments: &[f64]) -> Vec<f64> {
        treatments
            .iter()
            .zip(self.yhat1.iter().zip(&self.yhat0))
            .map(|(&t, (&a, &b))| if t > 0.5 { a } else { b })
            .collect()
    }
}

/// `τ̂_i = ŷ¹_i − ŷ⁰_i`.
pub fn estimate_ite(out: &ForwardOutput) -> Vec<f64> {
    out.yhat1.iter().zip(&out.yhat0).map(|(a, b)| a - b).collect()
}

/// Parameter leaves of one tape, indexed by [`ParamId`].
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(tape: &mut Tape, params: &'a ModelParams) -> Self {
        let vars = params.store.ids().map(|id| tape.param(&params.store, id)).collect();
        Self { params, vars }
    }

    /// Uses existing leaves, one per parameter in [`ParamStore::ids`] order.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<Var>) -> Result<Self, ModelError> {
        if vars.len() != params.store.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} leaves for {} parameters",
                vars.len(),
                params.store.len()
            )));
        }
        Ok(Self { params, vars })
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Sum of squared regularized weights, recorded on the tape.
    pub fn l2_penalty(&self, tape: &mut Tape) -> Result<Option<Var>, NumericsError> {
        let store = &self.params.store;
        let mut total: Option<Var> = None;
        for id in store.ids().filter(|&id| store.is_regularized(id)) {
            let sq = tape.sum_squares(self.var(id));
            total = Some(match total {
                None => sq,
                Some(t) => tape.add(t, sq)?,
            });
        }
        Ok(total)
    }
}

fn mlp(tape: &mut Tape, bound: &BoundParams, layers: &[Dense], x: Var) -> Result<Var, NumericsError> {
    let mut h = x;
    for (l, layer) in layers.iter().enumerate() {
        h = tape.matmul(h, bound.var(layer.weight))?;
        h = tape.add_row(h, bound.var(layer.bias))?;
        if l + 1 < layers.len() {
            h = tape.activation(h, Activation::Relu);
        }
    }
    Ok(h)
}

fn check_inputs(x: &Tensor, t: &[f64], structure: &Interference, cfg: &ModelConfig) -> Result<(), ModelError> {
    let n = structure.num_nodes();
    if x.rows() != n || t.len() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "{} feature rows and {} treatments for {n} nodes",
            x.rows(),
            t.len()
        )));
    }
    if x.cols() != cfg.d_in {
        return Err(ModelError::ShapeMismatch(format!(
            "{} features, model expects {}",
            x.cols(),
            cfg.d_in
        )));
    }
    if t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ModelError::ShapeMismatch("treatments must be 0/1".into()));
    }
    Ok(())
}

fn attention_var(
    tape: &mut Tape,
    bound: &BoundParams,
    h: &Arc<Hypergraph>,
    z: Var,
) -> Result<Var, NumericsError> {
    let heads = &bound.params.layout.attention;
    let d_a = bound.params.config.d_attn;
    let zedge = ops::edge_mean_var(tape, h, z)?;
    let mut total: Option<Var> = None;
    for head in heads {
        let proj = bound.var(head.proj);
        let avec = bound.var(head.vec);
        let a_node = tape.slice_rows(avec, 0, d_a)?;
        let a_edge = tape.slice_rows(avec, d_a, d_a)?;
        let zn = tape.matmul(z, proj)?;
        let u = tape.matmul(zn, a_node)?;
        let ze = tape.matmul(zedge, proj)?;
        let v = tape.matmul(ze, a_edge)?;
        let s = ops::incidence_sum_var(tape, h, u, v)?;
        let s = tape.activation(s, Activation::ATTENTION_LEAKY);
        let alpha = ops::segment_softmax_var(tape, h, s)?;
        total = Some(match total {
            None => alpha,
            Some(t) => tape.add(t, alpha)?,
        });
    }
    let total = total.expect("at least one head");
    Ok(if heads.len() > 1 {
        tape.scale(total, 1.0 / heads.len() as f64)
    } else {
        total
    })
}

/// Records the full forward pass on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    x: &Tensor,
    t: &Arc<[f64]>,
    structure: &Interference,
) -> Result<ForwardVars, ModelError> {
    let params = bound.params;
    let cfg = &params.config;
    check_inputs(x, t, structure, cfg)?;
    let layout = &params.layout;

    let xin = tape.constant(x.clone());
    let z = mlp(tape, bound, &layout.encoder, xin)?;

    let attention = match structure {
        Interference::Hyper(h) if cfg.variant.uses_attention() => Some(attention_var(tape, bound, h, z)?),
        _ => None,
    };
    let propagate = |tape: &mut Tape, p: Var| -> Result<Var, NumericsError> {
        match structure {
            Interference::Hyper(h) => ops::hyper_conv_var(tape, h, attention, p),
            Interference::Graph(a) => ops::sparse_mul_var(tape, a, p),
        }
    };

    let masked = tape.scale_rows(z, t.clone())?;
    let mut p = masked;
    let mut pre_first = None;
    for (l, &w) in layout.conv.iter().enumerate() {
        let mp = propagate(tape, p)?;
        if l == 0 {
            pre_first = Some(mp);
        }
        let lin = tape.matmul(mp, bound.var(w))?;
        p = tape.activation(lin, Activation::CONV_LEAKY);
    }

    let (p1, p0) = if cfg.counterfactual_interference {
        // flip only node i's own mask: (M·P⁰)_i ± M_ii z_i
        let self_term = match structure {
            Interference::Hyper(h) => match attention {
                Some(a) => ops::hyper_diag_var(tape, h, a, z)?,
                None => {
                    let ones = tape.constant(Tensor::full(h.nnz(), 1, 1.0));
                    ops::hyper_diag_var(tape, h, ones, z)?
                }
            },
            Interference::Graph(a) => tape.scale_rows(z, a.diagonal().into())?,
        };
        let pre = pre_first.expect("one conv layer");
        let w = bound.var(layout.conv[0]);
        let untreated: Arc<[f64]> = t.iter().map(|v| 1.0 - v).collect();
        let add = tape.scale_rows(self_term, untreated)?;
        let pre1 = tape.add(pre, add)?;
        let remove = tape.scale_rows(self_term, t.clone())?;
        let pre0 = tape.sub(pre, remove)?;
        let l1 = tape.matmul(pre1, w)?;
        let l0 = tape.matmul(pre0, w)?;
        (
            tape.activation(l1, Activation::CONV_LEAKY),
            tape.activation(l0, Activation::CONV_LEAKY),
        )
    } else {
        (p, p)
    };

    let in1 = tape.concat_cols(z, p1)?;
    let in0 = if p0 == p1 { in1 } else { tape.concat_cols(z, p0)? };
    let yhat1 = mlp(tape, bound, &layout.head1, in1)?;
    let yhat0 = mlp(tape, bound, &layout.head0, in0)?;
    Ok(ForwardVars {
        z,
        p,
        yhat1,
        yhat0,
        attention,
    })
}

/// Forward pass with the structure built from `h` for the configured variant.
pub fn forward(x: &Tensor, t: &[f64], h: &Hypergraph, params: &ModelParams) -> Result<ForwardOutput, ModelError> {
    let structure = Interference::build(h, params.config.variant);
    forward_with(x, t, &structure, params)
}

/// Forward pass over a prebuilt structure.
pub fn forward_with(
    x: &Tensor,
    t: &[f64],
    structure: &Interference,
    params: &ModelParams,
) -> Result<ForwardOutput, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let t: Arc<[f64]> = t.into();
    let vars = forward_on_tape(&mut tape, &bound, x, &t, structure)?;
    Ok(ForwardOutput::from_tape(&tape, &vars))
}

/// Confounder representations `Z = MLP(X)`.
pub fn encode_confounders(x: &Tensor, params: &ModelParams) -> Result<Tensor, ModelError> {
    if x.cols() != params.config.d_in {
        return Err(ModelError::ShapeMismatch(format!(
            "{} features, model expects {}",
            x.cols(),
            params.config.d_in
        )));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let xin = tape.constant(x.clone());
    let z = mlp(&mut tape, &bound, &params.layout.encoder, xin)?;
    Ok(tape.value(z).clone())
}

/// Mean member representation of every hyperedge.
pub fn hyperedge_repr(z: &Tensor, h: &Hypergraph) -> Result<Tensor, ModelError> {
    if z.rows() != h.num_nodes() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} rows for {} nodes",
            z.rows(),
            h.num_nodes()
        )));
    }
    Ok(ops::edge_mean(h, z))
}

/// Node–hyperedge attention weights, node-major per incidence of `h`.
pub fn attention_scores(z: &Tensor, h: &Hypergraph, params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    if params.layout.attention.is_empty() {
        return Err(ModelError::InvalidConfig(format!(
            "variant {} has no attention",
            params.config.variant
        )));
    }
    if z.shape() != (h.num_nodes(), params.config.d_z) {
        return Err(ModelError::ShapeMismatch(format!("Z is {:?}", z.shape())));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let zv = tape.constant(z.clone());
    let h = Arc::new(h.clone());
    let a = attention_var(&mut tape, &bound, &h, zv)?;
    Ok(tape.value(a).data().to_vec())
}

/// Interference representations `P` for given `Z` and treatments.
pub fn interference_forward(
    z: &Tensor,
    t: &[f64],
    h: &Hypergraph,
    params: &ModelParams,
) -> Result<Tensor, ModelError> {
    let structure = Interference::build(h, params.config.variant);
    if z.shape() != (structure.num_nodes(), params.config.d_z) || t.len() != structure.num_nodes() {
        return Err(ModelError::ShapeMismatch(format!(
            "Z {:?} with {} treatments",
            z.shape(),
            t.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let zv = tape.constant(z.clone());
    let attention = match &structure {
        Interference::Hyper(h) if params.config.variant.uses_attention() => {
            Some(attention_var(&mut tape, &bound, h, zv)?)
        }
        _ => None,
    };
    let mut p = tape.scale_rows(zv, t.into())?;
    for &w in &params.layout.conv {
        let mp = match &structure {
            Interference::Hyper(h) => ops::hyper_conv_var(&mut tape, h, attention, p)?,
            Interference::Graph(a) => ops::sparse_mul_var(&mut tape, a, p)?,
        };
        let lin = tape.matmul(mp, bound.var(w))?;
        p = tape.activation(lin, Activation::CONV_LEAKY);
    }
    Ok(tape.value(p).clone())
}

/// Both heads applied to `[Z ∥ P]`.
pub fn predict_outcomes(z: &Tensor, p: &Tensor, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if z.rows() != p.rows() || z.cols() != params.config.d_z || p.cols() != params.config.d_p {
        return Err(ModelError::ShapeMismatch(format!(
            "Z {:?} and P {:?}",
            z.shape(),
            p.shape()
        )));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let zv = tape.constant(z.clone());
    let pv = tape.constant(p.clone());
    let input = tape.concat_cols(zv, pv)?;
    let y1 = mlp(&mut tape, &bound, &params.layout.head1, input)?;
    let y0 = mlp(&mut tape, &bound, &params.layout.head0, input)?;
    Ok((tape.value(y1).data().to_vec(), tape.value(y0).data().to_vec()))
}

#[cfg(test)]
mod tests;
