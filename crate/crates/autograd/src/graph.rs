//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every named parameter leaf.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::{Matrix, ParamStore, ShapeError};

type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    LayerNorm { input: NodeId, rstd: Vec<f64> },
    RmsNorm { input: NodeId, rinv: Vec<f64> },
    Softmax(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    Square(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    GatherRows { input: NodeId, indices: Vec<usize> },
    Sum(NodeId),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    tracked: bool,
}

/// Records operations for a single forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, NodeId>>,
}

/// A handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

/// Gradients of named parameters.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(Matrix::sum_of_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale_in_place(s);
        }
    }

    /// Adds `other` into `self`, keyed by parameter name.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op, tracked: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        nodes.len() - 1
    }

    fn var(&self, id: NodeId) -> Var<'_> {
        Var { graph: self, id }
    }

    fn value_of(&self, id: NodeId) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].tracked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// An untracked input.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        let id = self.push(value, Op::Leaf, false);
        self.var(id)
    }

    /// Binds parameter `name` from `store`. Repeated calls return the same leaf.
    ///
    /// Panics if the store has no such parameter; parameter names are fixed at
    /// model construction.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return self.var(id);
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let id = self.push(value, Op::Leaf, true);
        self.params.borrow_mut().insert(name.to_string(), id);
        self.var(id)
    }

    /// Reverse pass from a `1x1` output. Returns gradients of all bound parameters.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, ShapeError> {
        if output.shape() != (1, 1) {
            return Err(ShapeError::new("backward requires a 1x1 output"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            let mut send = |target: NodeId, g: Matrix| {
                if !nodes[target].tracked {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |i: NodeId| nodes[i].value.as_ref();
            match &node.op {
                Op::Leaf => unreachable!("leaves are handled above"),
                Op::MatMul(a, b) => {
                    send(*a, grad.matmul_t(val(*b))?);
                    send(*b, val(*a).t_matmul(&grad)?);
                }
                Op::MatMulT(a, b) => {
                    send(*a, grad.matmul(val(*b))?);
                    send(*b, grad.t_matmul(val(*a))?);
                }
                Op::Add(a, b) => {
                    send(*b, grad.clone());
                    send(*a, grad);
                }
                Op::Sub(a, b) => {
                    send(*b, grad.map(|v| -v));
                    send(*a, grad);
                }
                Op::Mul(a, b) => {
                    send(*a, grad.zip_map(val(*b), |g, y| g * y));
                    send(*b, grad.zip_map(val(*a), |g, x| g * x));
                }
                Op::AddRow(a, row) => {
                    send(*row, grad.column_sums());
                    send(*a, grad);
                }
                Op::MulRow(a, row) => {
                    let r = val(*row);
                    let x = val(*a);
                    let mut ga = grad.clone();
                    let mut gr = vec![0.0; r.cols()];
                    for i in 0..grad.rows() {
                        let gi = grad.row(i);
                        let xi = x.row(i);
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = gi[j] * r.data()[j];
                            gr[j] += gi[j] * xi[j];
                        }
                    }
                    send(*a, ga);
                    send(*row, Matrix::row_vector(gr));
                }
                Op::Scale(a, s) => send(*a, grad.map(|v| v * s)),
                Op::AddScalar(a) => send(*a, grad),
                Op::LayerNorm { input, rstd } => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(grad.rows(), grad.cols());
                    let n = grad.cols() as f64;
                    for i in 0..grad.rows() {
                        let gy = grad.row(i);
                        let yi = y.row(i);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(yi).map(|(g, y)| g * y).sum::<f64>() / n;
                        for (j, out) in gx.row_mut(i).iter_mut().enumerate() {
                            *out = rstd[i] * (gy[j] - mean_g - yi[j] * mean_gy);
                        }
                    }
                    send(*input, gx);
                }
                Op::RmsNorm { input, rinv } => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(grad.rows(), grad.cols());
                    let n = grad.cols() as f64;
                    for i in 0..grad.rows() {
                        let gy = grad.row(i);
                        let yi = y.row(i);
                        let mean_gy = gy.iter().zip(yi).map(|(g, y)| g * y).sum::<f64>() / n;
                        for (j, out) in gx.row_mut(i).iter_mut().enumerate() {
                            *out = rinv[i] * (gy[j] - yi[j] * mean_gy);
                        }
                    }
                    send(*input, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(grad.rows(), grad.cols());
                    for i in 0..grad.rows() {
                        let gy = grad.row(i);
                        let yi = y.row(i);
                        let dot: f64 = gy.iter().zip(yi).map(|(g, y)| g * y).sum();
                        for (j, out) in gx.row_mut(i).iter_mut().enumerate() {
                            *out = yi[j] * (gy[j] - dot);
                        }
                    }
                    send(*a, gx);
                }
                Op::Gelu(a) => send(*a, grad.zip_map(val(*a), |g, x| g * gelu_grad(x))),
                Op::Silu(a) => send(
                    *a,
                    grad.zip_map(val(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                ),
                Op::Square(a) => send(*a, grad.zip_map(val(*a), |g, x| 2.0 * g * x)),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        send(p, grad.slice_cols(start, w));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        send(p, grad.slice_rows(start, h));
                        start += h;
                    }
                }
                Op::SliceRows { input, start } => {
                    let src = val(*input);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..grad.rows() {
                        g.row_mut(start + i).copy_from_slice(grad.row(i));
                    }
                    send(*input, g);
                }
                Op::SliceCols { input, start } => {
                    let src = val(*input);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    let w = grad.cols();
                    for i in 0..grad.rows() {
                        g.row_mut(i)[*start..start + w].copy_from_slice(grad.row(i));
                    }
                    send(*input, g);
                }
                Op::GatherRows { input, indices } => {
                    let src = val(*input);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        for (o, v) in g.row_mut(idx).iter_mut().zip(grad.row(i)) {
                            *o += v;
                        }
                    }
                    send(*input, g);
                }
                Op::Sum(a) => {
                    let src = val(*a);
                    send(*a, Matrix::filled(src.rows(), src.cols(), grad.get(0, 0)));
                }
            }
        }

        let mut out = Gradients::default();
        for (name, &id) in self.params.borrow().iter() {
            let g = match grads.get_mut(id).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let (r, c) = nodes[id].value.shape();
                    Matrix::zeros(r, c)
                }
            };
            out.grads.insert(name.clone(), g);
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
}

fn check_same(a: &Matrix, b: &Matrix, op: &str) -> Result<(), ShapeError> {
    if a.shape() != b.shape() {
        return Err(ShapeError::new(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'g> {
        let tracked = self.graph.tracked(self.id);
        let id = self.graph.push(value, op, tracked);
        self.graph.var(id)
    }

    fn binary(self, other: Var<'g>, value: Matrix, op: Op) -> Var<'g> {
        let tracked = self.graph.tracked(self.id) || self.graph.tracked(other.id);
        let id = self.graph.push(value, op, tracked);
        self.graph.var(id)
    }

    fn many(graph: &'g Graph, parts: &[Var<'g>], value: Matrix, op: Op) -> Var<'g> {
        let tracked = parts.iter().any(|p| graph.tracked(p.id));
        let id = graph.push(value, op, tracked);
        graph.var(id)
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::MatMul(self.id, rhs.id)))
    }

    /// `self * rhs^T`.
    pub fn matmul_t(self, rhs: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let v = self.value().matmul_t(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::MatMulT(self.id, rhs.id)))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let (a, b) = (self.value(), rhs.value());
        check_same(&a, &b, "add")?;
        Ok(self.binary(rhs, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let (a, b) = (self.value(), rhs.value());
        check_same(&a, &b, "sub")?;
        Ok(self.binary(rhs, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let (a, b) = (self.value(), rhs.value());
        check_same(&a, &b, "mul")?;
        Ok(self.binary(rhs, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, rhs.id)))
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(ShapeError::new("add_row: expected a matching row vector"));
        }
        let mut out = (*a).clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a `1 x cols` row.
    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>, ShapeError> {
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(ShapeError::new("mul_row: expected a matching row vector"));
        }
        let mut out = (*a).clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= v;
            }
        }
        Ok(self.binary(row, out, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let n = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut rstd = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let mean = xi.iter().sum::<f64>() / n;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(xi) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        self.unary(
            out,
            Op::LayerNorm {
                input: self.id,
                rstd,
            },
        )
    }

    /// Row-wise RMS normalization without a gain.
    pub fn rms_norm(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let (out, rinv) = rms_normalize(&x, eps);
        self.unary(
            out,
            Op::RmsNorm {
                input: self.id,
                rinv,
            },
        )
    }

    pub fn softmax_rows(self) -> Var<'g> {
        let v = softmax_rows(&self.value());
        self.unary(v, Op::Softmax(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn silu(self) -> Var<'g> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Matrix::filled(1, 1, self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>, ShapeError> {
        let x = self.value();
        if start + len > x.rows() {
            return Err(ShapeError::new("slice_rows out of bounds"));
        }
        Ok(self.unary(
            x.slice_rows(start, len),
            Op::SliceRows {
                input: self.id,
                start,
            },
        ))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>, ShapeError> {
        let x = self.value();
        if start + len > x.cols() {
            return Err(ShapeError::new("slice_cols out of bounds"));
        }
        Ok(self.unary(
            x.slice_cols(start, len),
            Op::SliceCols {
                input: self.id,
                start,
            },
        ))
    }

    /// Row `i` of the output is row `indices[i]` of `self`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g>, ShapeError> {
        let x = self.value();
        if indices.iter().any(|&i| i >= x.rows()) {
            return Err(ShapeError::new("gather_rows index out of bounds"));
        }
        Ok(self.unary(
            x.select_rows(indices),
            Op::GatherRows {
                input: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>, ShapeError> {
        let graph = parts
            .first()
            .ok_or_else(|| ShapeError::new("concat of zero parts"))?
            .graph;
        let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Matrix> = values.iter().map(Rc::as_ref).collect();
        let v = Matrix::concat_cols(&refs)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(Self::many(graph, parts, v, Op::ConcatCols(ids)))
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>, ShapeError> {
        let graph = parts
            .first()
            .ok_or_else(|| ShapeError::new("concat of zero parts"))?
            .graph;
        let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Matrix> = values.iter().map(Rc::as_ref).collect();
        let v = Matrix::concat_rows(&refs)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(Self::many(graph, parts, v, Op::ConcatRows(ids)))
    }
}

/// Row-wise RMS normalization; returns the normalized rows and each row's `1/rms`.
pub fn rms_normalize(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut rinv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let ms = xi.iter().map(|v| v * v).sum::<f64>() / n;
        let r = 1.0 / (ms + eps).sqrt();
        for (o, v) in out.row_mut(i).iter_mut().zip(xi) {
            *o = v * r;
        }
        rinv.push(r);
    }
    (out, rinv)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let max = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, v) in out.row_mut(i).iter_mut().zip(xi) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in out.row_mut(i) {
            *o /= total;
        }
    }
    out
}
