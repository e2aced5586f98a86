//! Reverse-mode differentiation over a small, closed set of dense matrix
//! operations.
//!
//! A [`Tape`] records nodes in creation order, which is always a valid
//! topological order because an operation can only reference nodes that
//! already exist. [`Tape::forward`] evaluates every node in that order and
//! [`Tape::backward`] walks it in reverse, visiting each node once.
//!
//! Operations are recorded lazily: shape errors surface from `forward`, naming
//! the offending nodes.

use crate::tensor::{gemm, Matrix};
use std::cell::Cell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use thiserror::Error;

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs} is {lhs_shape:?}, {rhs} is {rhs_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: NodeId,
        lhs_shape: (usize, usize),
        rhs: NodeId,
        rhs_shape: (usize, usize),
    },
    #[error("{op} on {node} expects {expected}, found shape {shape:?}")]
    BadShape {
        op: &'static str,
        node: NodeId,
        expected: &'static str,
        shape: (usize, usize),
    },
    #[error("gather on {node} references row {row} of a {rows}-row matrix")]
    GatherOutOfRange {
        node: NodeId,
        row: usize,
        rows: usize,
    },
    #[error("input node {0} has no value assigned")]
    MissingValue(NodeId),
    #[error("no root node set on the tape")]
    NoRoot,
    #[error("root {node} must be 1x1, found {shape:?}")]
    NonScalarRoot { node: NodeId, shape: (usize, usize) },
    #[error("backward called before forward")]
    NotForwarded,
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Operation kinds supported by the tape.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    MatMul(NodeId, NodeId),
    /// Elementwise sum; the right operand may also be a `1×cols` row that is
    /// added to every row of the left operand.
    Add(NodeId, NodeId),
    Tanh(NodeId),
    /// `max(0, min(1, x))`.
    HardClamp(NodeId),
    Mul(NodeId, NodeId),
    RowSoftmax(NodeId),
    /// `P(x + sigma * eps > 0)` for standard normal `eps`, i.e. `Q(-x / sigma)`.
    GaussianTail(NodeId, f64),
    Sum(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    Negate(NodeId),
    Reciprocal(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    RowSum(NodeId),
    Transpose(NodeId),
    /// For a vector `v`, entry `n` is `sum_m |v[n] - v[m]|`.
    AbsDiffSum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Tanh(_) => "tanh",
            Op::HardClamp(_) => "hard-clamp",
            Op::Mul(..) => "elementwise-mul",
            Op::RowSoftmax(_) => "row-softmax",
            Op::GaussianTail(..) => "gaussian-tail",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Gather(..) => "gather",
            Op::Negate(_) => "negate",
            Op::Reciprocal(_) => "reciprocal",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::RowSum(_) => "row-sum",
            Op::Transpose(_) => "transpose",
            Op::AbsDiffSum(_) => "abs-diff-sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Matrix>,
    is_param: bool,
}

/// Standard normal upper tail `Q(z) = P(Z > z)`.
pub fn gaussian_q(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn gaussian_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `P(x + sigma * eps > 0) = Q(-x / sigma)`.
#[inline]
pub fn gaussian_tail(x: f64, sigma: f64) -> f64 {
    gaussian_q(-x / sigma)
}

#[inline]
pub fn hard_clamp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

thread_local! {
    static FLIP_TANH_ADJOINT: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with a deliberately wrong tanh adjoint on the current thread.
/// Used to confirm that gradient checks detect broken derivatives.
#[doc(hidden)]
pub fn with_broken_tanh_adjoint<R>(f: impl FnOnce() -> R) -> R {
    FLIP_TANH_ADJOINT.with(|c| c.set(true));
    let out = f();
    FLIP_TANH_ADJOINT.with(|c| c.set(false));
    out
}

/// Recorded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    root: Option<NodeId>,
    adjoints: Vec<Option<Matrix>>,
    forwarded: bool,
}

/// Gradients of the root with respect to every parameter node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(NodeId, Matrix)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.grads.iter().map(|(n, g)| (*n, g))
    }

    pub fn into_vec(self) -> Vec<(NodeId, Matrix)> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Matrix>, is_param: bool) -> NodeId {
        self.forwarded = false;
        self.nodes.push(Node {
            op,
            value,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input with a value.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, Some(value), false)
    }

    /// Trainable input; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, Some(value), true)
    }

    /// Input without a value yet; assign with [`Tape::set_value`].
    pub fn placeholder(&mut self) -> NodeId {
        self.push(Op::Input, None, false)
    }

    pub fn set_value(&mut self, id: NodeId, value: Matrix) {
        let node = &mut self.nodes[id.0];
        assert!(
            matches!(node.op, Op::Input),
            "set_value on non-input node {id}"
        );
        node.value = Some(value);
        self.forwarded = false;
    }

    pub fn set_root(&mut self, id: NodeId) {
        self.root = Some(id);
        self.forwarded = false;
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn value(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_param)
            .map(NodeId)
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), None, false)
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None, false)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a), None, false)
    }
    pub fn hard_clamp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::HardClamp(a), None, false)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None, false)
    }
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSoftmax(a), None, false)
    }
    pub fn gaussian_tail(&mut self, a: NodeId, sigma: f64) -> NodeId {
        self.push(Op::GaussianTail(a, sigma), None, false)
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), None, false)
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c), None, false)
    }
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(a, c), None, false)
    }
    pub fn gather(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::Gather(a, rows), None, false)
    }
    pub fn negate(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Negate(a), None, false)
    }
    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Reciprocal(a), None, false)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a), None, false)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a), None, false)
    }
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a), None, false)
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a), None, false)
    }
    pub fn abs_diff_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::AbsDiffSum(a), None, false)
    }

    fn val(&self, id: NodeId) -> &Matrix {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parent evaluated before child")
    }

    fn eval(&self, id: NodeId) -> Result<Matrix> {
        let node = &self.nodes[id.0];
        let out = match &node.op {
            Op::Input => return node.value.clone().ok_or(DiffError::MissingValue(id)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if va.cols() != vb.rows() {
                    return Err(mismatch("matmul", *a, va, *b, vb));
                }
                va.matmul(vb)
            }
            Op::Add(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if va.shape() == vb.shape() {
                    zip(va, vb, |x, y| x + y)
                } else if vb.rows() == 1 && vb.cols() == va.cols() {
                    let mut out = va.clone();
                    for r in 0..out.rows() {
                        for (o, &y) in out.row_mut(r).iter_mut().zip(vb.as_slice()) {
                            *o += y;
                        }
                    }
                    out
                } else {
                    return Err(mismatch("add", *a, va, *b, vb));
                }
            }
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::HardClamp(a) => self.val(*a).map(hard_clamp),
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if va.shape() != vb.shape() {
                    return Err(mismatch("elementwise-mul", *a, va, *b, vb));
                }
                zip(va, vb, |x, y| x * y)
            }
            Op::RowSoftmax(a) => {
                let va = self.val(*a);
                let mut out = va.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
            Op::GaussianTail(a, sigma) => {
                let s = *sigma;
                self.val(*a).map(|x| gaussian_tail(x, s))
            }
            Op::Sum(a) => Matrix::scalar(self.val(*a).sum()),
            Op::Scale(a, c) => {
                let c = *c;
                self.val(*a).map(|x| c * x)
            }
            Op::Offset(a, c) => {
                let c = *c;
                self.val(*a).map(|x| x + c)
            }
            Op::Gather(a, rows) => {
                let va = self.val(*a);
                if let Some(&bad) = rows.iter().find(|&&r| r >= va.rows()) {
                    return Err(DiffError::GatherOutOfRange {
                        node: *a,
                        row: bad,
                        rows: va.rows(),
                    });
                }
                va.select_rows(rows)
            }
            Op::Negate(a) => self.val(*a).map(|x| -x),
            Op::Reciprocal(a) => self.val(*a).map(f64::recip),
            Op::Sqrt(a) => self.val(*a).map(f64::sqrt),
            Op::Square(a) => self.val(*a).map(|x| x * x),
            Op::RowSum(a) => {
                let va = self.val(*a);
                Matrix::col_vector((0..va.rows()).map(|r| va.row(r).iter().sum()).collect())
            }
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::AbsDiffSum(a) => {
                let va = self.val(*a);
                if va.rows() != 1 && va.cols() != 1 {
                    return Err(DiffError::BadShape {
                        op: "abs-diff-sum",
                        node: *a,
                        expected: "a row or column vector",
                        shape: va.shape(),
                    });
                }
                let v = va.as_slice();
                let out: Vec<f64> = v
                    .iter()
                    .map(|&vn| v.iter().map(|&vm| (vn - vm).abs()).sum())
                    .collect();
                Matrix::from_vec(va.rows(), va.cols(), out)
            }
        };
        Ok(out)
    }

    /// Evaluates every node and returns the root scalar.
    pub fn forward(&mut self) -> Result<f64> {
        let root = self.root.ok_or(DiffError::NoRoot)?;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input) {
                if self.nodes[i].value.is_none() {
                    return Err(DiffError::MissingValue(NodeId(i)));
                }
                continue;
            }
            let v = self.eval(NodeId(i))?;
            self.nodes[i].value = Some(v);
        }
        let rv = self.val(root);
        if rv.shape() != (1, 1) {
            return Err(DiffError::NonScalarRoot {
                node: root,
                shape: rv.shape(),
            });
        }
        let out = rv.get(0, 0);
        self.forwarded = true;
        Ok(out)
    }

    /// Propagates adjoints from the root and returns the parameter gradients.
    ///
    /// The clamp uses subgradient 1 strictly inside `(0, 1)` and 0 elsewhere;
    /// the square root uses 0 at the origin.
    pub fn backward(&mut self) -> Result<Gradients> {
        if !self.forwarded {
            return Err(DiffError::NotForwarded);
        }
        let root = self.root.ok_or(DiffError::NoRoot)?;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        adj[root.0] = Some(Matrix::scalar(1.0));
        let flip_tanh = FLIP_TANH_ADJOINT.with(Cell::get);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let out = self.nodes[i].value.as_ref().expect("forwarded");
            match &self.nodes[i].op {
                Op::Input => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    // dA = G B^T, dB = A^T G
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, true, &mut ga, 0.0);
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(va, true, &g, false, &mut gb, 0.0);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    let vb = self.val(*b);
                    let gb = if vb.shape() == g.shape() {
                        g.clone()
                    } else {
                        let mut acc = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (s, &x) in acc.iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                        Matrix::row_vector(acc)
                    };
                    accumulate(&mut adj, *b, gb);
                    accumulate(&mut adj, *a, g);
                }
                Op::Tanh(a) => {
                    let sign = if flip_tanh { -1.0 } else { 1.0 };
                    accumulate(
                        &mut adj,
                        *a,
                        zip(&g, out, |gi, y| sign * gi * (1.0 - y * y)),
                    );
                }
                Op::HardClamp(a) => {
                    let x = self.val(*a);
                    let ga = zip(&g, x, |gi, xi| if xi > 0.0 && xi < 1.0 { gi } else { 0.0 });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let ga = zip(&g, vb, |gi, y| gi * y);
                    let gb = zip(&g, va, |gi, x| gi * x);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::RowSoftmax(a) => {
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::GaussianTail(a, sigma) => {
                    let s = *sigma;
                    let x = self.val(*a);
                    accumulate(
                        &mut adj,
                        *a,
                        zip(&g, x, |gi, xi| gi * gaussian_pdf(xi / s) / s),
                    );
                }
                Op::Sum(a) => {
                    let va = self.val(*a);
                    accumulate(
                        &mut adj,
                        *a,
                        Matrix::filled(va.rows(), va.cols(), g.get(0, 0)),
                    );
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj, *a, g.map(|x| c * x));
                }
                Op::Offset(a, _) => accumulate(&mut adj, *a, g),
                Op::Gather(a, rows) => {
                    let va = self.val(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Negate(a) => accumulate(&mut adj, *a, g.map(|x| -x)),
                Op::Reciprocal(a) => {
                    accumulate(&mut adj, *a, zip(&g, out, |gi, y| -gi * y * y));
                }
                Op::Sqrt(a) => {
                    let ga = zip(&g, out, |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.val(*a);
                    accumulate(&mut adj, *a, zip(&g, x, |gi, xi| 2.0 * gi * xi));
                }
                Op::RowSum(a) => {
                    let va = self.val(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let gr = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|o| *o = gr);
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::AbsDiffSum(a) => {
                    let va = self.val(*a);
                    let v = va.as_slice();
                    let gs = g.as_slice();
                    // d/dv_k sum_n g_n sum_m |v_n - v_m| = sum_m sign(v_k - v_m) (g_k + g_m)
                    let ga: Vec<f64> = (0..v.len())
                        .map(|k| {
                            (0..v.len())
                                .map(|m| sign(v[k] - v[m]) * (gs[k] + gs[m]))
                                .sum()
                        })
                        .collect();
                    accumulate(&mut adj, *a, Matrix::from_vec(va.rows(), va.cols(), ga));
                }
            }
        }

        let grads = (0..n)
            .filter(|&i| self.nodes[i].is_param)
            .map(|i| {
                let g = adj[i].take().unwrap_or_else(|| {
                    let v = self.nodes[i].value.as_ref().expect("param value");
                    Matrix::zeros(v.rows(), v.cols())
                });
                (NodeId(i), g)
            })
            .collect();
        self.adjoints = adj;
        Ok(Gradients { grads })
    }

    /// Adjoint of an arbitrary input node from the last backward pass.
    pub fn adjoint(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Encodes which side of every non-differentiable point the current
    /// forward values lie on: clamp regions, and pairwise orderings inside
    /// [`Op::AbsDiffSum`]. Two evaluations with equal signatures lie in the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::HardClamp(a) => {
                    if let Some(x) = self.nodes[a.0].value.as_ref() {
                        sig.extend(x.as_slice().iter().map(|&v| {
                            if v <= 0.0 {
                                0
                            } else if v >= 1.0 {
                                2
                            } else {
                                1
                            }
                        }));
                    }
                }
                Op::AbsDiffSum(a) => {
                    if let Some(x) = self.nodes[a.0].value.as_ref() {
                        let v = x.as_slice();
                        for (i, &vi) in v.iter().enumerate() {
                            for &vj in &v[i + 1..] {
                                sig.push(match vi.partial_cmp(&vj) {
                                    Some(std::cmp::Ordering::Less) => 0,
                                    Some(std::cmp::Ordering::Equal) => 1,
                                    _ => 2,
                                });
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Whether any clamp input sits exactly on a kink.
    pub fn on_kink(&self) -> bool {
        self.nodes.iter().any(|node| match &node.op {
            Op::HardClamp(a) => self.nodes[a.0]
                .value
                .as_ref()
                .is_some_and(|x| x.as_slice().iter().any(|&v| v == 0.0 || v == 1.0)),
            _ => false,
        })
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mismatch(op: &'static str, a: NodeId, va: &Matrix, b: NodeId, vb: &Matrix) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a,
        lhs_shape: va.shape(),
        rhs: b,
        rhs_shape: vb.shape(),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Outcome of one parameter entry in a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Passed,
    Failed,
    /// The finite-difference stencil crosses a non-differentiable point.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub param: NodeId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.status != CheckStatus::Skipped)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failed(&self) -> usize {
        self.count(CheckStatus::Failed)
    }

    pub fn skipped(&self) -> usize {
        self.count(CheckStatus::Skipped)
    }

    pub fn checked(&self) -> usize {
        self.entries.len() - self.skipped()
    }

    pub fn passed(&self) -> bool {
        self.failed() == 0
    }

    fn count(&self, s: CheckStatus) -> usize {
        self.entries.iter().filter(|e| e.status == s).count()
    }
}

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error between two derivative estimates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients with central differences for every entry of
/// the given parameter nodes.
///
/// Entries whose stencil `theta ± h` changes the [`Tape::kink_signature`], or
/// whose base point sits exactly on a clamp kink, are marked
/// [`CheckStatus::Skipped`].
pub fn grad_check(tape: &mut Tape, params: &[NodeId], h: f64, tol: f64) -> Result<GradCheckReport> {
    assert!(h > 0.0, "finite-difference step must be positive");
    tape.forward()?;
    let base_sig = tape.kink_signature();
    let base_on_kink = tape.on_kink();
    let grads = tape.backward()?;
    let mut entries = Vec::new();

    for &p in params {
        let analytic = grads
            .get(p)
            .cloned()
            .or_else(|| tape.adjoint(p).cloned())
            .unwrap_or_else(|| {
                let v = tape.value(p).expect("param value");
                Matrix::zeros(v.rows(), v.cols())
            });
        let original = tape.value(p).expect("param value").clone();
        for idx in 0..original.len() {
            let mut plus = original.clone();
            plus.as_mut_slice()[idx] += h;
            tape.set_value(p, plus);
            let f_plus = tape.forward()?;
            let sig_plus = tape.kink_signature();

            let mut minus = original.clone();
            minus.as_mut_slice()[idx] -= h;
            tape.set_value(p, minus);
            let f_minus = tape.forward()?;
            let sig_minus = tape.kink_signature();

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let rel = relative_error(a, numeric);
            let crosses = base_on_kink || sig_plus != base_sig || sig_minus != base_sig;
            let status = if crosses {
                CheckStatus::Skipped
            } else if rel < tol {
                CheckStatus::Passed
            } else {
                CheckStatus::Failed
            };
            entries.push(CheckEntry {
                param: p,
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
                status,
            });
        }
        tape.set_value(p, original);
    }
    tape.forward()?;
    tape.backward()?;
    Ok(GradCheckReport {
        entries,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_tape(op: impl Fn(&mut Tape, NodeId) -> NodeId, x: f64) -> (Tape, NodeId) {
        let mut t = Tape::new();
        let w = t.param(Matrix::scalar(x));
        let y = op(&mut t, w);
        let s = t.sum(y);
        t.set_root(s);
        (t, w)
    }

    #[test]
    fn tanh_at_origin() {
        let (mut t, w) = scalar_tape(|t, w| t.tanh(w), 0.0);
        assert_eq!(t.forward().unwrap(), 0.0);
        let g = t.backward().unwrap();
        assert_eq!(g.get(w).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(vec![0.0, 0.0, 0.0]));
        let s = t.row_softmax(x);
        let r = t.sum(s);
        t.set_root(r);
        t.forward().unwrap();
        for &p in t.value(s).unwrap().as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_tail_at_origin_is_half() {
        let (mut t, _) = scalar_tape(|t, w| t.gaussian_tail(w, 0.5), 0.0);
        assert_eq!(t.forward().unwrap(), 0.5);
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]));
        let x = t.constant(Matrix::col_vector(vec![1.0, -2.0, 3.0]));
        let y = t.matmul(w, x);
        let s = t.sum(y);
        t.set_root(s);
        t.forward().unwrap();
        let g = t.backward().unwrap();
        assert_eq!(
            g.get(w).unwrap().as_slice(),
            &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]
        );
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let (mut t, _) = scalar_tape(|t, w| t.tanh(w), 0.3);
        assert_eq!(t.backward().unwrap_err(), DiffError::NotForwarded);
    }

    #[test]
    fn shape_mismatch_names_both_nodes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let c = t.matmul(a, b);
        let s = t.sum(c);
        t.set_root(s);
        match t.forward().unwrap_err() {
            DiffError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!((lhs, rhs), (a, b));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 1));
        t.set_root(a);
        assert!(matches!(t.forward(), Err(DiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn clamp_subgradient_zero_on_boundary_and_outside() {
        for (x, expect) in [(-0.5, 0.0), (0.0, 0.0), (0.5, 1.0), (1.0, 0.0), (1.5, 0.0)] {
            let (mut t, w) = scalar_tape(|t, w| t.hard_clamp(w), x);
            t.forward().unwrap();
            assert_eq!(
                t.backward().unwrap().get(w).unwrap().get(0, 0),
                expect,
                "x={x}"
            );
        }
    }

    #[test]
    fn identity_loss_check_is_exact() {
        let (mut t, w) = scalar_tape(|_, w| w, 0.7);
        let report = grad_check(&mut t, &[w], 1e-5, 1e-4).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert!(report.entries[0].rel_error < 1e-10);
        assert_eq!(report.entries[0].status, CheckStatus::Passed);
    }

    #[test]
    fn parameter_on_clamp_kink_is_skipped() {
        let (mut t, w) = scalar_tape(|t, w| t.hard_clamp(w), 0.0);
        let report = grad_check(&mut t, &[w], 1e-5, 1e-4).unwrap();
        assert_eq!(report.entries[0].status, CheckStatus::Skipped);
        assert!(report.passed());
    }

    /// Every op, composed into one scalar, against central differences.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_m = |r, c| {
            Matrix::from_vec(
                r,
                c,
                (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        };
        let mut t = Tape::new();
        let w = t.param(rand_m(3, 4));
        let b = t.param(rand_m(1, 4));
        let x = t.constant(rand_m(5, 3));
        let h = t.matmul(x, w);
        let h = t.add(h, b);
        let a = t.tanh(h);
        let c = t.hard_clamp(h);
        let m = t.mul(a, c);
        let sm = t.row_softmax(m);
        let gt = t.gaussian_tail(h, 0.5);
        let g = t.gather(gt, vec![0, 2, 2]);
        let sq = t.square(g);
        let rs = t.row_sum(sq);
        let sr = t.sqrt(rs);
        let off = t.offset(sr, 0.1);
        let rc = t.reciprocal(off);
        let tr = t.transpose(rc);
        let ad = t.abs_diff_sum(tr);
        let ng = t.negate(ad);
        let sc = t.scale(ng, 0.3);
        let s1 = t.sum(sc);
        let s2 = t.sum(sm);
        let sm2 = t.mul(sm, sm);
        let s3 = t.sum(sm2);
        let s12 = t.add(s1, s2);
        let root = t.add(s12, s3);
        t.set_root(root);
        let report = grad_check(&mut t, &[w, b], 1e-5, 1e-6).unwrap();
        assert!(report.checked() > 0);
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
    }

    #[test]
    fn broken_tanh_adjoint_is_detected() {
        let report = with_broken_tanh_adjoint(|| {
            let (mut t, w) = scalar_tape(|t, w| t.tanh(w), 0.3);
            grad_check(&mut t, &[w], 1e-5, 1e-4).unwrap()
        });
        assert!(!report.passed());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let w = t.param(Matrix::from_vec(2, 2, vec![0.3, -0.1, 0.7, 0.2]));
            let x = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
            let y = t.matmul(x, w);
            let y = t.tanh(y);
            let y = t.row_softmax(y);
            let s = t.sum(y);
            let s = t.square(s);
            t.set_root(s);
            (t, w)
        };
        let (mut t1, w1) = build();
        let (mut t2, w2) = build();
        let v1 = t1.forward().unwrap();
        let v2 = t2.forward().unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        let g1 = t1.backward().unwrap();
        let g2 = t2.backward().unwrap();
        assert_eq!(g1.get(w1).unwrap(), g2.get(w2).unwrap());
    }
}
