//! Hypergraph structure with a compressed incidence matrix stored in both
//! orientations, plus the derived matrices the model and the simulator need.
//!
//! Incidence entries are numbered in node-major order: entry `k` is the
//! `k`-th `(node, edge)` pair when walking nodes `0..n` and, within a node,
//! its hyperedges in increasing edge id. Per-incidence weights (attention
//! scores, overlays) are always laid out in that order.

mod io;

pub use io::{format_hypergraph, parse_hypergraph, read_hypergraph, write_hypergraph};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error, Clone)]
pub enum HypergraphError {
    #[error("hyperedge {edge} references node {node} but n = {n}")]
    OutOfRangeNode { edge: usize, node: usize, n: usize },
    #[error("hyperedge {edge} is degenerate: {reason}")]
    DegenerateEdge { edge: usize, reason: String },
    #[error("node {node} out of range for n = {n}")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("hypergraph needs at least one node")]
    Empty,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::sync::Arc<std::io::Error>),
}

impl From<std::io::Error> for HypergraphError {
    fn from(e: std::io::Error) -> Self {
        HypergraphError::Io(std::sync::Arc::new(e))
    }
}

/// Hypergraph over nodes `0..n` with `m` hyperedges of size at least two.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n: usize,
    // edge-major (CSC): members of edge e are edge_nodes[edge_ptr[e]..edge_ptr[e+1]]
    edge_ptr: Vec<usize>,
    edge_nodes: Vec<usize>,
    // node-major index of each edge-major entry
    edge_entry: Vec<usize>,
    // node-major (CSR): edges of node i are node_edges[node_ptr[i]..node_ptr[i+1]]
    node_ptr: Vec<usize>,
    node_edges: Vec<usize>,
}

impl Hypergraph {
    /// Builds a hypergraph from explicit member lists. Member order within an
    /// edge is normalized to increasing node id.
    pub fn new(n: usize, edges: &[Vec<usize>]) -> Result<Self, HypergraphError> {
        if n == 0 {
            return Err(HypergraphError::Empty);
        }
        let mut edge_ptr = Vec::with_capacity(edges.len() + 1);
        let mut edge_nodes = Vec::new();
        edge_ptr.push(0);
        for (e, members) in edges.iter().enumerate() {
            if members.len() < 2 {
                return Err(HypergraphError::DegenerateEdge {
                    edge: e,
                    reason: format!("size {} < 2", members.len()),
                });
            }
            let mut sorted = members.clone();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                if w[0] == w[1] {
                    return Err(HypergraphError::DegenerateEdge {
                        edge: e,
                        reason: format!("duplicate member {}", w[0]),
                    });
                }
            }
            if let Some(&bad) = sorted.last().filter(|&&v| v >= n) {
                return Err(HypergraphError::OutOfRangeNode { edge: e, node: bad, n });
            }
            edge_nodes.extend_from_slice(&sorted);
            edge_ptr.push(edge_nodes.len());
        }

        let nnz = edge_nodes.len();
        let mut degree = vec![0usize; n];
        for &v in &edge_nodes {
            degree[v] += 1;
        }
        let mut node_ptr = vec![0usize; n + 1];
        for i in 0..n {
            node_ptr[i + 1] = node_ptr[i] + degree[i];
        }
        let mut cursor = node_ptr[..n].to_vec();
        let mut node_edges = vec![0usize; nnz];
        let mut edge_entry = vec![0usize; nnz];
        // edges visited in increasing id, so each node's edge list comes out sorted
        for e in 0..edges.len() {
            for slot in edge_ptr[e]..edge_ptr[e + 1] {
                let v = edge_nodes[slot];
                let k = cursor[v];
                node_edges[k] = e;
                edge_entry[slot] = k;
                cursor[v] += 1;
            }
        }
        Ok(Self {
            n,
            edge_ptr,
            edge_nodes,
            edge_entry,
            node_ptr,
            node_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edge_ptr.len() - 1
    }

    /// Number of stored incidences (nonzeros of H).
    pub fn nnz(&self) -> usize {
        self.edge_nodes.len()
    }

    /// Members of hyperedge `e`, sorted.
    pub fn edge(&self, e: usize) -> &[usize] {
        &self.edge_nodes[self.edge_ptr[e]..self.edge_ptr[e + 1]]
    }

    /// Node-major incidence indices of the members of `e`, aligned with [`Self::edge`].
    pub fn edge_entries(&self, e: usize) -> &[usize] {
        &self.edge_entry[self.edge_ptr[e]..self.edge_ptr[e + 1]]
    }

    /// Hyperedges containing node `i`, sorted.
    pub fn node_edges(&self, i: usize) -> &[usize] {
        &self.node_edges[self.node_ptr[i]..self.node_ptr[i + 1]]
    }

    /// Node-major incidence index range of node `i`.
    pub fn node_entry_range(&self, i: usize) -> std::ops::Range<usize> {
        self.node_ptr[i]..self.node_ptr[i + 1]
    }

    pub fn edges(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.num_edges()).map(move |e| self.edge(e))
    }

    /// `(node, edge)` of every incidence in node-major order.
    pub fn incidences(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.node_edges(i).iter().map(move |&e| (i, e)))
    }

    pub fn edge_lists(&self) -> Vec<Vec<usize>> {
        self.edges().map(<[usize]>::to_vec).collect()
    }

    pub fn degree_vector(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.node_ptr[i + 1] - self.node_ptr[i]).collect()
    }

    pub fn edge_size_vector(&self) -> Vec<usize> {
        self.edge_ptr.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn contains(&self, i: usize, e: usize) -> bool {
        self.node_edges(i).binary_search(&e).is_ok()
    }

    /// Dense binary incidence matrix (n × m).
    pub fn incidence_dense(&self) -> Tensor {
        let m = self.num_edges();
        let mut h = Tensor::zeros(self.n, m);
        for (i, e) in self.incidences() {
            h.set(i, e, 1.0);
        }
        h
    }

    /// `d_i^{-1/2}`, zero for isolated nodes.
    pub fn inv_sqrt_degrees(&self) -> Vec<f64> {
        self.degree_vector()
            .into_iter()
            .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect()
    }

    pub fn inv_edge_sizes(&self) -> Vec<f64> {
        self.edge_size_vector()
            .into_iter()
            .map(|b| 1.0 / b as f64)
            .collect()
    }

    /// Dense `D^{-1/2} H' B^{-1} H'^T D^{-1/2}` with `H' = H ∘ weights`.
    ///
    /// `D` and `B` always come from the binary incidence. Rows and columns of
    /// isolated nodes are zero.
    pub fn laplacian(&self, edge_weights: Option<&Tensor>) -> Result<Tensor, HypergraphError> {
        let weights = match edge_weights {
            None => vec![1.0; self.nnz()],
            Some(w) => self.incidence_weights_from_dense(w)?,
        };
        Ok(self.laplacian_with_incidence_weights(&weights))
    }

    /// Same as [`Self::laplacian`] with weights given per incidence in node-major order.
    pub fn laplacian_with_incidence_weights(&self, weights: &[f64]) -> Tensor {
        assert_eq!(weights.len(), self.nnz(), "one weight per incidence");
        let dinv = self.inv_sqrt_degrees();
        let binv = self.inv_edge_sizes();
        let mut l = Tensor::zeros(self.n, self.n);
        for e in 0..self.num_edges() {
            let members = self.edge(e);
            let entries = self.edge_entries(e);
            for (a, (&i, &ki)) in members.iter().zip(entries).enumerate() {
                let wi = weights[ki] * dinv[i] * binv[e];
                for (&j, &kj) in members[a..].iter().zip(&entries[a..]) {
                    let v = wi * weights[kj] * dinv[j];
                    *l.get_mut(i, j) += v;
                    if i != j {
                        *l.get_mut(j, i) += v;
                    }
                }
            }
        }
        l
    }

    /// Extracts per-incidence weights from a dense n × m overlay, rejecting
    /// mass placed outside the incidence pattern.
    pub fn incidence_weights_from_dense(&self, w: &Tensor) -> Result<Vec<f64>, HypergraphError> {
        if w.rows() != self.n || w.cols() != self.num_edges() {
            return Err(HypergraphError::ShapeMismatch(format!(
                "edge weights are {}x{}, incidence is {}x{}",
                w.rows(),
                w.cols(),
                self.n,
                self.num_edges()
            )));
        }
        for i in 0..self.n {
            for e in 0..self.num_edges() {
                let v = w.get(i, e);
                if v < 0.0 || (v != 0.0 && !self.contains(i, e)) {
                    return Err(HypergraphError::ShapeMismatch(format!(
                        "edge weight ({i},{e}) = {v} must be nonnegative and zero off the incidence pattern"
                    )));
                }
            }
        }
        Ok(self.incidences().map(|(i, e)| w.get(i, e)).collect())
    }

    /// Clique expansion: `i ~ j` iff they share at least one hyperedge.
    pub fn project_clique(&self) -> OrdinaryGraph {
        let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.n];
        for members in self.edges() {
            for &i in members {
                for &j in members {
                    if i != j {
                        neighbors[i].insert(j);
                    }
                }
            }
        }
        OrdinaryGraph {
            n: self.n,
            adjacency: neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    /// Keeps exactly the hyperedges with at most `k` members.
    pub fn filter_by_edge_size(&self, k: usize) -> Hypergraph {
        let kept: Vec<Vec<usize>> = self.edges().filter(|e| e.len() <= k).map(<[usize]>::to_vec).collect();
        Hypergraph::new(self.n, &kept).expect("subset of a valid hypergraph is valid")
    }

    /// Nodes sharing a hyperedge with `i`, excluding `i`.
    pub fn neighborhood(&self, i: usize) -> Result<BTreeSet<usize>, HypergraphError> {
        if i >= self.n {
            return Err(HypergraphError::NodeOutOfRange { node: i, n: self.n });
        }
        Ok(self
            .node_edges(i)
            .iter()
            .flat_map(|&e| self.edge(e).iter().copied())
            .filter(|&j| j != i)
            .collect())
    }

    /// Fraction of `i`'s neighbors whose treatment equals `t_i`.
    pub fn homophily_ratio(&self, treatments: &[f64], i: usize) -> Result<f64, HypergraphError> {
        if treatments.len() != self.n {
            return Err(HypergraphError::ShapeMismatch(format!(
                "{} treatments for {} nodes",
                treatments.len(),
                self.n
            )));
        }
        let hood = self.neighborhood(i)?;
        if hood.is_empty() {
            return Err(HypergraphError::IsolatedNode(i));
        }
        let same = hood.iter().filter(|&&j| treatments[j] == treatments[i]).count();
        Ok(same as f64 / hood.len() as f64)
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Hypergraph {
        let edges: Vec<Vec<usize>> = self.edges().map(|e| e.iter().map(|&v| perm[v]).collect()).collect();
        Hypergraph::new(self.n, &edges).expect("permutation preserves validity")
    }
}

/// Simple undirected graph stored as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinaryGraph {
    n: usize,
    adjacency: Vec<Vec<usize>>,
}

impl OrdinaryGraph {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `[i, j]` with `i < j`.
    pub fn edge_pairs(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (i, nb) in self.adjacency.iter().enumerate() {
            for &j in nb.iter().filter(|&&j| j > i) {
                out.push(vec![i, j]);
            }
        }
        out
    }

    /// The graph read as a hypergraph whose hyperedges are the edges.
    pub fn as_pair_hypergraph(&self) -> Hypergraph {
        Hypergraph::new(self.n, &self.edge_pairs()).expect("edges are valid pairs")
    }

    /// `D̃^{-1/2}(A + I)D̃^{-1/2}` in sparse row form.
    pub fn gcn_operator(&self) -> SparseMatrix {
        let scale: Vec<f64> = self
            .adjacency
            .iter()
            .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
            .collect();
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..self.n {
            let mut row: Vec<usize> = self.adjacency[i].clone();
            let pos = row.binary_search(&i).unwrap_err();
            row.insert(pos, i);
            for j in row {
                cols.push(j);
                vals.push(scale[i] * scale[j]);
            }
            row_ptr.push(cols.len());
        }
        SparseMatrix {
            rows: self.n,
            cols: self.n,
            row_ptr,
            col_idx: cols,
            values: vals,
        }
    }

    /// Dense symmetric-normalized adjacency with self-loops.
    pub fn gcn_adjacency(&self) -> Tensor {
        self.gcn_operator().to_dense()
    }
}

/// Compressed sparse row matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                *out.get_mut(i, j) += v;
            }
        }
        out
    }

    /// `self · x`
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.cols, x.rows());
        let c = x.cols();
        let mut out = Tensor::zeros(self.rows, c);
        for i in 0..self.rows {
            let dst = i * c;
            for (j, v) in self.row(i) {
                let src = x.row(j);
                for (o, s) in out.data_mut()[dst..dst + c].iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · x`
    pub fn mul_dense_transposed(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.rows, x.rows());
        let c = x.cols();
        let mut out = Tensor::zeros(self.cols, c);
        for i in 0..self.rows {
            let src = x.row(i).to_vec();
            for (j, v) in self.row(i) {
                let dst = j * c;
                for (o, s) in out.data_mut()[dst..dst + c].iter_mut().zip(&src) {
                    *o += v * s;
                }
            }
        }
        out
    }

    /// Main diagonal.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }
}
