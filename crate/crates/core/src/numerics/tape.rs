use std::sync::Arc;

use super::{gemm, Activation, NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation defined outside this module.
///
/// The caller computes the forward value and hands it to [`Tape::custom`];
/// the tape calls `backward` with the upstream gradient and expects one entry
/// per input, `None` where `needs[k]` is false.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Arc<[f64]>),
    Act(Var, Activation),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    Sum(Var),
    SumSquares(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records matrix operations for one reverse pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient is reported by id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.variable(store.get(id).clone());
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + 1·row` with `row` a 1 × cols bias.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(NumericsError::ShapeMismatch(format!(
                "bias {}x{} for input {}x{}",
                r.rows(),
                r.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let c = x.cols();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies row `i` by the constant `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Arc<[f64]>) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if w.len() != x.rows() {
            return Err(NumericsError::ShapeMismatch(format!(
                "{} row weights for {} rows",
                w.len(),
                x.rows()
            )));
        }
        let mut out = x.clone();
        for (i, &s) in w.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScaleRows(a, w), rg))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        let rg = self.rg(a);
        self.push(out, Op::Act(a, kind), rg)
    }

    /// `[a ∥ b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(NumericsError::ShapeMismatch(format!(
                "concat {} rows with {} rows",
                x.rows(),
                y.rows()
            )));
        }
        let out = Tensor::from_fn(x.rows(), x.cols() + y.cols(), |i, j| {
            if j < x.cols() {
                x.get(i, j)
            } else {
                y.get(i, j - x.cols())
            }
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(NumericsError::ShapeMismatch(format!(
                "rows {start}..{} of a {}-row tensor",
                start + len,
                x.rows()
            )));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = x.select_rows(&idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Rows at `idx`, in that order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(NumericsError::ShapeMismatch(format!(
                "row {bad} of a {}-row tensor",
                x.rows()
            )));
        }
        let out = x.select_rows(&idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_squares());
        let rg = self.rg(a);
        self.push(out, Op::SumSquares(a), rg)
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Reverse pass from a 1×1 `loss`. A tape can be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.consumed {
            return Err(NumericsError::StaleTape);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss(shape.0, shape.1));
        }
        if !self.value(loss).all_finite() {
            return Err(NumericsError::NonFiniteValue("loss".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let need = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    let (x, y) = (val(*a), val(*b));
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    gemm(g, false, y, true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if need(*b) {
                    let (x, y) = (val(*a), val(*b));
                    let mut gb = Tensor::zeros(y.rows(), y.cols());
                    gemm(x, true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g.zip_map(val(*b), |u, v| u * v).unwrap());
                }
                if need(*b) {
                    acc(*b, g.zip_map(val(*a), |u, v| u * v).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                if need(*a) {
                    acc(*a, g.clone());
                }
                if need(*row) {
                    let c = g.cols();
                    let mut gr = Tensor::zeros(1, c);
                    for i in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*row, gr);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::ScaleRows(a, w) => {
                let mut ga = g.clone();
                for (i, &s) in w.iter().enumerate() {
                    for v in ga.row_mut(i) {
                        *v *= s;
                    }
                }
                acc(*a, ga);
            }
            Op::Act(a, kind) => {
                let x = val(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                acc(*a, Tensor::from_vec(x.rows(), x.cols(), data).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                if need(*a) {
                    acc(*a, Tensor::from_fn(g.rows(), ca, |i, j| g.get(i, j)));
                }
                if need(*b) {
                    let cb = val(*b).cols();
                    acc(*b, Tensor::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j)));
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                acc(*a, val(*a).scale(s));
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let out = op.backward(&ins, &node.value, g, &needs);
                debug_assert_eq!(out.len(), inputs.len(), "{} backward arity", op.name());
                for ((&v, gi), n) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(gi), true) = (gi, n) {
                        debug_assert_eq!(gi.shape(), val(v).shape(), "{} gradient shape", op.name());
                        acc(v, gi);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a recorded value, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a leaf, zeros when unreachable.
    pub fn wrt_or_zero(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    /// One gradient per parameter of `store`, zeros where unreachable.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id.0].add_assign(g);
            }
        }
        out
    }
}
