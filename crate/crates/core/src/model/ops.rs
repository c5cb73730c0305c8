//! Tape operations over the sparse incidence structure.
//!
//! Per-incidence vectors (`nnz × 1`) follow the node-major incidence order of
//! [`Hypergraph`].

use std::sync::Arc;

use crate::hypergraph::{Hypergraph, SparseMatrix};
use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn expect_rows(t: &Tensor, rows: usize, what: &str) -> Result<(), NumericsError> {
    if t.rows() != rows {
        return Err(NumericsError::ShapeMismatch(format!(
            "{what}: expected {rows} rows, got {}",
            t.rows()
        )));
    }
    Ok(())
}

fn expect_incidence_vector(t: &Tensor, h: &Hypergraph) -> Result<(), NumericsError> {
    if t.shape() != (h.nnz(), 1) {
        return Err(NumericsError::ShapeMismatch(format!(
            "incidence weights {}x{}, expected {}x1",
            t.rows(),
            t.cols(),
            h.nnz()
        )));
    }
    Ok(())
}

/// Mean of member rows for every hyperedge: `m × c`.
pub fn edge_mean(h: &Hypergraph, x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Tensor::zeros(h.num_edges(), c);
    for e in 0..h.num_edges() {
        let members = h.edge(e);
        let inv = 1.0 / members.len() as f64;
        let dst = out.row_mut(e);
        for &i in members {
            axpy(inv, x.row(i), dst);
        }
    }
    out
}

struct EdgeMeanOp(Arc<Hypergraph>);

impl CustomOp for EdgeMeanOp {
    fn name(&self) -> &'static str {
        "edge_mean"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let h = &self.0;
        let mut gx = Tensor::zeros(inputs[0].rows(), inputs[0].cols());
        for e in 0..h.num_edges() {
            let members = h.edge(e);
            let inv = 1.0 / members.len() as f64;
            for &i in members {
                axpy(inv, g.row(e), gx.row_mut(i));
            }
        }
        vec![Some(gx)]
    }
}

pub fn edge_mean_var(tape: &mut Tape, h: &Arc<Hypergraph>, x: Var) -> Result<Var, NumericsError> {
    expect_rows(tape.value(x), h.num_nodes(), "edge_mean input")?;
    let out = edge_mean(h, tape.value(x));
    Ok(tape.custom(Box::new(EdgeMeanOp(h.clone())), &[x], out))
}

struct IncidenceSumOp(Arc<Hypergraph>);

impl CustomOp for IncidenceSumOp {
    fn name(&self) -> &'static str {
        "incidence_sum"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let h = &self.0;
        let mut gu = Tensor::zeros(h.num_nodes(), 1);
        let mut gv = Tensor::zeros(h.num_edges(), 1);
        for (k, (i, e)) in h.incidences().enumerate() {
            let gk = g.data()[k];
            gu.data_mut()[i] += gk;
            gv.data_mut()[e] += gk;
        }
        vec![needs[0].then_some(gu), needs[1].then_some(gv)]
    }
}

/// `s_k = u_i + v_e` for every incidence `k = (i, e)`.
pub fn incidence_sum_var(tape: &mut Tape, h: &Arc<Hypergraph>, u: Var, v: Var) -> Result<Var, NumericsError> {
    let (tu, tv) = (tape.value(u), tape.value(v));
    if tu.shape() != (h.num_nodes(), 1) || tv.shape() != (h.num_edges(), 1) {
        return Err(NumericsError::ShapeMismatch(format!(
            "incidence_sum of {:?} and {:?}",
            tu.shape(),
            tv.shape()
        )));
    }
    let data: Vec<f64> = h.incidences().map(|(i, e)| tu.data()[i] + tv.data()[e]).collect();
    let out = Tensor::column(data);
    Ok(tape.custom(Box::new(IncidenceSumOp(h.clone())), &[u, v], out))
}

/// Softmax over each node's incident hyperedges.
pub fn segment_softmax(h: &Hypergraph, s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for i in 0..h.num_nodes() {
        let r = h.node_entry_range(i);
        if r.is_empty() {
            continue;
        }
        let mx = s[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in r.clone() {
            out[k] = (s[k] - mx).exp();
            total += out[k];
        }
        for k in r {
            out[k] /= total;
        }
    }
    out
}

struct SegmentSoftmaxOp(Arc<Hypergraph>);

impl CustomOp for SegmentSoftmaxOp {
    fn name(&self) -> &'static str {
        "segment_softmax"
    }

    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, g: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let h = &self.0;
        let a = out.data();
        let mut gs = vec![0.0; a.len()];
        for i in 0..h.num_nodes() {
            let r = h.node_entry_range(i);
            let inner: f64 = r.clone().map(|k| a[k] * g.data()[k]).sum();
            for k in r {
                gs[k] = a[k] * (g.data()[k] - inner);
            }
        }
        vec![Some(Tensor::column(gs))]
    }
}

pub fn segment_softmax_var(tape: &mut Tape, h: &Arc<Hypergraph>, s: Var) -> Result<Var, NumericsError> {
    expect_incidence_vector(tape.value(s), h)?;
    let out = Tensor::column(segment_softmax(h, tape.value(s).data()));
    Ok(tape.custom(Box::new(SegmentSoftmaxOp(h.clone())), &[s], out))
}

fn scaled_rows(x: &Tensor, scale: &[f64]) -> Tensor {
    let mut out = x.clone();
    for (i, &s) in scale.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// `E_e = b_e⁻¹ Σ_{j∈e} w_je S_j` with `S = D^{-1/2} X`.
fn edge_messages(h: &Hypergraph, w: &[f64], s: &Tensor) -> Tensor {
    let binv = h.inv_edge_sizes();
    let mut msg = Tensor::zeros(h.num_edges(), s.cols());
    for e in 0..h.num_edges() {
        let dst = msg.row_mut(e);
        for (&j, &k) in h.edge(e).iter().zip(h.edge_entries(e)) {
            axpy(binv[e] * w[k], s.row(j), dst);
        }
    }
    msg
}

/// `D^{-1/2} H̃ B^{-1} H̃ᵀ D^{-1/2} X` with `H̃ = H ∘ w`, never materializing the Laplacian.
pub fn hyper_propagate(h: &Hypergraph, w: &[f64], x: &Tensor) -> Tensor {
    let dinv = h.inv_sqrt_degrees();
    let s = scaled_rows(x, &dinv);
    let msg = edge_messages(h, w, &s);
    let mut out = Tensor::zeros(h.num_nodes(), x.cols());
    for i in 0..h.num_nodes() {
        let r = h.node_entry_range(i);
        let dst = out.row_mut(i);
        for (k, &e) in r.zip(h.node_edges(i)) {
            axpy(dinv[i] * w[k], msg.row(e), dst);
        }
    }
    out
}

struct HyperConvOp {
    graph: Arc<Hypergraph>,
    // None: unit incidence weights, input list is [x]
    weighted: bool,
}

impl CustomOp for HyperConvOp {
    fn name(&self) -> &'static str {
        "hyper_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let h = &self.graph;
        let ones;
        let (w, x) = if self.weighted {
            (inputs[0].data(), inputs[1])
        } else {
            ones = vec![1.0; h.nnz()];
            (&ones[..], inputs[0])
        };
        let need_w = self.weighted && needs[0];
        let need_x = needs[needs.len() - 1];
        let dinv = h.inv_sqrt_degrees();
        let binv = h.inv_edge_sizes();
        let c = x.cols();

        let s = scaled_rows(x, &dinv);
        let msg = edge_messages(h, w, &s);
        let gs = scaled_rows(g, &dinv);

        // outer product: out_i = Σ_e w_ie E_e
        let mut gmsg = Tensor::zeros(h.num_edges(), c);
        let mut gw = vec![0.0; h.nnz()];
        for i in 0..h.num_nodes() {
            for (k, &e) in h.node_entry_range(i).zip(h.node_edges(i)) {
                axpy(w[k], gs.row(i), gmsg.row_mut(e));
                if need_w {
                    gw[k] += dot(gs.row(i), msg.row(e));
                }
            }
        }
        // inner product: E_e = b_e⁻¹ Σ_j w_je S_j
        let mut gsin = Tensor::zeros(h.num_nodes(), c);
        for e in 0..h.num_edges() {
            for (&j, &k) in h.edge(e).iter().zip(h.edge_entries(e)) {
                if need_x {
                    axpy(binv[e] * w[k], gmsg.row(e), gsin.row_mut(j));
                }
                if need_w {
                    gw[k] += binv[e] * dot(s.row(j), gmsg.row(e));
                }
            }
        }
        let gx = need_x.then(|| scaled_rows(&gsin, &dinv));
        if self.weighted {
            vec![need_w.then(|| Tensor::column(gw)), gx]
        } else {
            vec![gx]
        }
    }
}

/// Records `D^{-1/2} H̃ B^{-1} H̃ᵀ D^{-1/2} X`. Without `weights` the binary incidence is used.
pub fn hyper_conv_var(
    tape: &mut Tape,
    h: &Arc<Hypergraph>,
    weights: Option<Var>,
    x: Var,
) -> Result<Var, NumericsError> {
    expect_rows(tape.value(x), h.num_nodes(), "hyper_conv input")?;
    let op = HyperConvOp {
        graph: h.clone(),
        weighted: weights.is_some(),
    };
    match weights {
        Some(w) => {
            expect_incidence_vector(tape.value(w), h)?;
            let out = hyper_propagate(h, tape.value(w).data(), tape.value(x));
            Ok(tape.custom(Box::new(op), &[w, x], out))
        }
        None => {
            let out = hyper_propagate(h, &vec![1.0; h.nnz()], tape.value(x));
            Ok(tape.custom(Box::new(op), &[x], out))
        }
    }
}

/// Diagonal of the weighted Laplacian: `d_i⁻¹ Σ_{e∋i} w_ie² / b_e`.
pub fn hyper_diagonal(h: &Hypergraph, w: &[f64]) -> Vec<f64> {
    let binv = h.inv_edge_sizes();
    let deg = h.degree_vector();
    (0..h.num_nodes())
        .map(|i| {
            if deg[i] == 0 {
                return 0.0;
            }
            let s: f64 = h
                .node_entry_range(i)
                .zip(h.node_edges(i))
                .map(|(k, &e)| w[k] * w[k] * binv[e])
                .sum();
            s / deg[i] as f64
        })
        .collect()
}

struct HyperDiagOp {
    graph: Arc<Hypergraph>,
    diag: Vec<f64>,
}

impl CustomOp for HyperDiagOp {
    fn name(&self) -> &'static str {
        "hyper_diag"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let h = &self.graph;
        let (w, x) = (inputs[0].data(), inputs[1]);
        let gw = needs[0].then(|| {
            let binv = h.inv_edge_sizes();
            let deg = h.degree_vector();
            let mut gw = vec![0.0; h.nnz()];
            for i in 0..h.num_nodes() {
                if deg[i] == 0 {
                    continue;
                }
                let gx = dot(g.row(i), x.row(i));
                for (k, &e) in h.node_entry_range(i).zip(h.node_edges(i)) {
                    gw[k] = 2.0 * w[k] * binv[e] * gx / deg[i] as f64;
                }
            }
            Tensor::column(gw)
        });
        let gx = needs[1].then(|| scaled_rows(g, &self.diag));
        vec![gw, gx]
    }
}

/// Records `diag(L̃) · X` for the attention-weighted Laplacian `L̃`.
pub fn hyper_diag_var(tape: &mut Tape, h: &Arc<Hypergraph>, weights: Var, x: Var) -> Result<Var, NumericsError> {
    expect_rows(tape.value(x), h.num_nodes(), "hyper_diag input")?;
    expect_incidence_vector(tape.value(weights), h)?;
    let diag = hyper_diagonal(h, tape.value(weights).data());
    let out = scaled_rows(tape.value(x), &diag);
    Ok(tape.custom(
        Box::new(HyperDiagOp {
            graph: h.clone(),
            diag,
        }),
        &[weights, x],
        out,
    ))
}

struct SparseMulOp(Arc<SparseMatrix>);

impl CustomOp for SparseMulOp {
    fn name(&self) -> &'static str {
        "sparse_mul"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, g: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(self.0.mul_dense_transposed(g))]
    }
}

/// Records `A · X` for a constant sparse `A`.
pub fn sparse_mul_var(tape: &mut Tape, a: &Arc<SparseMatrix>, x: Var) -> Result<Var, NumericsError> {
    expect_rows(tape.value(x), a.cols(), "sparse_mul input")?;
    let out = a.mul_dense(tape.value(x));
    Ok(tape.custom(Box::new(SparseMulOp(a.clone())), &[x], out))
}
