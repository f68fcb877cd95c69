//! Dense 64-bit tensors with tape-based reverse-mode differentiation, an Adam
//! optimizer, and the squashed-Gaussian log-density machinery used by the
//! policy losses.
//!
//! Tensors are rank-2 throughout: batches are `[rows, cols]`, row vectors are
//! `[1, n]` and scalars are `[1, 1]`. A tape is single-owner while recording
//! and running backward; tensors detached from any tape are plain values.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("backward requires a scalar loss, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("tensor data length {got} does not match shape {shape:?}")]
    DataLength { got: usize, shape: (usize, usize) },
}

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        if data.len() != rows * cols {
            return Err(AdError::DataLength {
                got: data.len(),
                shape: (rows, cols),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AdError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(AdError::InvalidArgument {
                    op: "from_rows",
                    message: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), AdError> {
        if self.shape() != other.shape() {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

/// `a * b` without a tape, cache-friendly ikj order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
    if a.cols != b.rows {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out.data[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = Tensor::zeros(m, n);
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut out.data[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    out
}

/// `a * b^T` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out.data[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// A structured linear operator recordable on the tape. `adjoint` must be the
/// exact transpose of `apply` with respect to the flat inner product; the
/// randomized finite-difference suite exercises that contract.
pub trait LinearMap: Send + Sync {
    fn name(&self) -> &'static str;
    fn output_shape(&self, input: (usize, usize)) -> (usize, usize);
    fn apply(&self, x: &Tensor) -> Tensor;
    fn adjoint(&self, y: &Tensor) -> Tensor;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Relu,
    Tanh,
    Square,
    Exp,
    Sqrt,
    Softplus,
    LogSigmoid,
    Ln,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryFn {
    fn eval(&self, x: f64) -> f64 {
        match self {
            UnaryFn::Relu => x.max(0.0),
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Square => x * x,
            UnaryFn::Exp => x.exp(),
            UnaryFn::Sqrt => x.sqrt(),
            UnaryFn::Softplus => softplus(x),
            UnaryFn::LogSigmoid => -softplus(-x),
            UnaryFn::Ln => x.ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match self {
            UnaryFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryFn::Tanh => 1.0 - y * y,
            UnaryFn::Square => 2.0 * x,
            UnaryFn::Exp => y,
            UnaryFn::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnaryFn::Softplus => sigmoid(x),
            UnaryFn::LogSigmoid => sigmoid(-x),
            UnaryFn::Ln => 1.0 / x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Unary {
        f: UnaryFn,
        x: NodeId,
    },
    Binary {
        f: BinaryFn,
        a: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddScalar {
        x: NodeId,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    BroadcastRows {
        x: NodeId,
    },
    BroadcastCols {
        x: NodeId,
    },
    RepeatCols {
        x: NodeId,
        counts: Vec<usize>,
    },
    Sum {
        x: NodeId,
    },
    SumCols {
        x: NodeId,
    },
    LogSumExpRows {
        x: NodeId,
    },
    GroupPool {
        x: NodeId,
        group_size: usize,
    },
    Custom {
        x: NodeId,
        map: Arc<dyn LinearMap>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Handle to a recorded tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients of a scalar loss with respect to every tape node that needed
/// them, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Records operations in execution order; inputs always precede consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fmt_impl: {}

    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.len())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn unary(&mut self, f: UnaryFn, x: NodeId) -> NodeId {
        let value = Tensor {
            rows: self.value(x).rows,
            cols: self.value(x).cols,
            data: self.value(x).data.iter().map(|&v| f.eval(v)).collect(),
        };
        let needs = self.needs(x);
        self.push(value, Op::Unary { f, x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Relu, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Tanh, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Square, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Exp, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Sqrt, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Softplus, x)
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::LogSigmoid, x)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Ln, x)
    }

    pub fn binary(&mut self, f: BinaryFn, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let op_name = match f {
            BinaryFn::Add => "add",
            BinaryFn::Sub => "sub",
            BinaryFn::Mul => "mul",
            BinaryFn::Div => "div",
        };
        self.value(a).same_shape(self.value(b), op_name)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| match f {
                BinaryFn::Add => x + y,
                BinaryFn::Sub => x - y,
                BinaryFn::Mul => x * y,
                BinaryFn::Div => x / y,
            })
            .collect();
        let value = Tensor {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary { f, a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(BinaryFn::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(BinaryFn::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(BinaryFn::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(BinaryFn::Div, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let value = matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transposed();
        let needs = self.needs(x);
        self.push(value, Op::Transpose { x }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = Tensor {
            rows: self.value(x).rows,
            cols: self.value(x).cols,
            data: self.value(x).data.iter().map(|&v| v * c).collect(),
        };
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = Tensor {
            rows: self.value(x).rows,
            cols: self.value(x).cols,
            data: self.value(x).data.iter().map(|&v| v + c).collect(),
        };
        let needs = self.needs(x);
        self.push(value, Op::AddScalar { x }, needs)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let (rows, ca, cb) = (ta.rows, ta.cols, tb.cols);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                rows,
                cols: ca + cb,
                data,
            },
            Op::ConcatCols { a, b },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AdError> {
        let t = self.value(x);
        if start + len > t.cols {
            return Err(AdError::InvalidArgument {
                op: "slice_cols",
                message: format!("range {}..{} out of {} columns", start, start + len, t.cols),
            });
        }
        let rows = t.rows;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                rows,
                cols: len,
                data,
            },
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Tiles a `[1, n]` row into `[rows, n]`.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId, AdError> {
        let t = self.value(x);
        if t.rows != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: t.shape(),
                rhs: (1, t.cols),
            });
        }
        let cols = t.cols;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(&t.data);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { rows, cols, data }, Op::BroadcastRows { x }, needs))
    }

    /// Tiles a `[B, 1]` column into `[B, cols]`.
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId, AdError> {
        let t = self.value(x);
        if t.cols != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: t.shape(),
                rhs: (t.rows, 1),
            });
        }
        let rows = t.rows;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(std::iter::repeat(t.data[r]).take(cols));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { rows, cols, data }, Op::BroadcastCols { x }, needs))
    }

    /// Repeats column `j` of `x` `counts[j]` times, preserving order.
    pub fn repeat_cols(&mut self, x: NodeId, counts: &[usize]) -> Result<NodeId, AdError> {
        let t = self.value(x);
        if counts.len() != t.cols {
            return Err(AdError::InvalidArgument {
                op: "repeat_cols",
                message: format!("{} counts for {} columns", counts.len(), t.cols),
            });
        }
        let rows = t.rows;
        let out_cols: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(rows * out_cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            for (j, &cnt) in counts.iter().enumerate() {
                data.extend(std::iter::repeat(row[j]).take(cnt));
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                rows,
                cols: out_cols,
                data,
            },
            Op::RepeatCols {
                x,
                counts: counts.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data.iter().sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    /// Mean of all entries, `[1, 1]`.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise sums, `[B, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        let needs = self.needs(x);
        self.push(value, Op::SumCols { x }, needs)
    }

    /// Numerically stable row-wise log-sum-exp, `[B, 1]`.
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = (0..t.rows)
            .map(|r| {
                let row = t.row_slice(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        let needs = self.needs(x);
        self.push(value, Op::LogSumExpRows { x }, needs)
    }

    /// Mean over consecutive column blocks of `group_size`: `[B, K*N] -> [B, K]`.
    pub fn group_pool(&mut self, x: NodeId, group_size: usize) -> Result<NodeId, AdError> {
        let t = self.value(x);
        if group_size == 0 || t.cols % group_size != 0 {
            return Err(AdError::InvalidArgument {
                op: "group_pool",
                message: format!("{} columns not divisible by block {}", t.cols, group_size),
            });
        }
        let k = t.cols / group_size;
        let mut data = Vec::with_capacity(t.rows * k);
        for r in 0..t.rows {
            let row = t.row_slice(r);
            for b in 0..k {
                let s: f64 = row[b * group_size..(b + 1) * group_size].iter().sum();
                data.push(s / group_size as f64);
            }
        }
        let value = Tensor {
            rows: t.rows,
            cols: k,
            data,
        };
        let needs = self.needs(x);
        Ok(self.push(value, Op::GroupPool { x, group_size }, needs))
    }

    /// Applies a structured linear operator with a caller-supplied adjoint.
    pub fn custom_linear(&mut self, x: NodeId, map: Arc<dyn LinearMap>) -> NodeId {
        let value = map.apply(self.value(x));
        debug_assert_eq!(value.shape(), map.output_shape(self.value(x).shape()));
        let needs = self.needs(x);
        self.push(value, Op::Custom { x, map }, needs)
    }

    /// Reverse-mode gradients of a scalar `loss` for every node that tracks
    /// gradients. Deterministic: identical tapes produce identical bits.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AdError> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(AdError::NonScalarLoss { shape: lt.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = self.nodes.iter().map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (head, tail) = grads.split_at_mut(i);
            let gy = tail[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            let mut add_to = |id: NodeId, delta: Tensor, head: &mut [Option<Tensor>]| {
                if !self.nodes[id.0].needs_grad {
                    return;
                }
                match &mut head[id.0] {
                    Some(g) => {
                        for (a, b) in g.data.iter_mut().zip(&delta.data) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Unary { f, x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .zip(&gy.data)
                        .map(|((&x0, &y0), &g)| g * f.derivative(x0, y0))
                        .collect();
                    add_to(
                        *x,
                        Tensor {
                            rows: xv.rows,
                            cols: xv.cols,
                            data,
                        },
                        head,
                    );
                }
                Op::Binary { f, a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    match f {
                        BinaryFn::Add => {
                            add_to(*a, gy.clone(), head);
                            add_to(*b, gy.clone(), head);
                        }
                        BinaryFn::Sub => {
                            add_to(*a, gy.clone(), head);
                            let data = gy.data.iter().map(|&g| -g).collect();
                            add_to(
                                *b,
                                Tensor {
                                    rows: bv.rows,
                                    cols: bv.cols,
                                    data,
                                },
                                head,
                            );
                        }
                        BinaryFn::Mul => {
                            let da = gy
                                .data
                                .iter()
                                .zip(&bv.data)
                                .map(|(&g, &y)| g * y)
                                .collect();
                            let db = gy
                                .data
                                .iter()
                                .zip(&av.data)
                                .map(|(&g, &x)| g * x)
                                .collect();
                            add_to(
                                *a,
                                Tensor {
                                    rows: av.rows,
                                    cols: av.cols,
                                    data: da,
                                },
                                head,
                            );
                            add_to(
                                *b,
                                Tensor {
                                    rows: bv.rows,
                                    cols: bv.cols,
                                    data: db,
                                },
                                head,
                            );
                        }
                        BinaryFn::Div => {
                            let da = gy
                                .data
                                .iter()
                                .zip(&bv.data)
                                .map(|(&g, &y)| g / y)
                                .collect();
                            let db = gy
                                .data
                                .iter()
                                .zip(node.value.data.iter().zip(&bv.data))
                                .map(|(&g, (&q, &y))| -g * q / y)
                                .collect();
                            add_to(
                                *a,
                                Tensor {
                                    rows: av.rows,
                                    cols: av.cols,
                                    data: da,
                                },
                                head,
                            );
                            add_to(
                                *b,
                                Tensor {
                                    rows: bv.rows,
                                    cols: bv.cols,
                                    data: db,
                                },
                                head,
                            );
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        add_to(*a, matmul_nt(gy, bv), head);
                    }
                    if self.nodes[b.0].needs_grad {
                        add_to(*b, matmul_tn(av, gy), head);
                    }
                }
                Op::Transpose { x } => {
                    add_to(*x, gy.transposed(), head);
                }
                Op::Scale { x, c } => {
                    let xv = self.value(*x);
                    let data = gy.data.iter().map(|&g| g * c).collect();
                    add_to(
                        *x,
                        Tensor {
                            rows: xv.rows,
                            cols: xv.cols,
                            data,
                        },
                        head,
                    );
                }
                Op::AddScalar { x } => {
                    add_to(*x, gy.clone(), head);
                }
                Op::ConcatCols { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ca, cb) = (av.cols, bv.cols);
                    let mut da = Tensor::zeros(av.rows, ca);
                    let mut db = Tensor::zeros(bv.rows, cb);
                    for r in 0..av.rows {
                        let row = gy.row_slice(r);
                        da.data[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                        db.data[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                    }
                    add_to(*a, da, head);
                    add_to(*b, db, head);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let len = node.value.cols;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        dx.data[r * xv.cols + start..r * xv.cols + start + len]
                            .copy_from_slice(gy.row_slice(r));
                    }
                    add_to(*x, dx, head);
                }
                Op::BroadcastRows { x } => {
                    let cols = node.value.cols;
                    let mut dx = Tensor::zeros(1, cols);
                    for r in 0..node.value.rows {
                        for (d, &g) in dx.data.iter_mut().zip(gy.row_slice(r)) {
                            *d += g;
                        }
                    }
                    add_to(*x, dx, head);
                }
                Op::BroadcastCols { x } => {
                    let rows = node.value.rows;
                    let mut dx = Tensor::zeros(rows, 1);
                    for r in 0..rows {
                        dx.data[r] = gy.row_slice(r).iter().sum();
                    }
                    add_to(*x, dx, head);
                }
                Op::RepeatCols { x, counts } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let grow = gy.row_slice(r);
                        let mut pos = 0;
                        for (j, &cnt) in counts.iter().enumerate() {
                            dx.data[r * xv.cols + j] = grow[pos..pos + cnt].iter().sum();
                            pos += cnt;
                        }
                    }
                    add_to(*x, dx, head);
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    let g = gy.scalar_value();
                    add_to(
                        *x,
                        Tensor {
                            rows: xv.rows,
                            cols: xv.cols,
                            data: vec![g; xv.len()],
                        },
                        head,
                    );
                }
                Op::SumCols { x } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let g = gy.data[r];
                        for d in &mut dx.data[r * xv.cols..(r + 1) * xv.cols] {
                            *d = g;
                        }
                    }
                    add_to(*x, dx, head);
                }
                Op::LogSumExpRows { x } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let y = node.value.data[r];
                        let g = gy.data[r];
                        for (d, &v) in dx.data[r * xv.cols..(r + 1) * xv.cols]
                            .iter_mut()
                            .zip(xv.row_slice(r))
                        {
                            *d = g * (v - y).exp();
                        }
                    }
                    add_to(*x, dx, head);
                }
                Op::GroupPool { x, group_size } => {
                    let xv = self.value(*x);
                    let k = node.value.cols;
                    let inv = 1.0 / *group_size as f64;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        for b in 0..k {
                            let g = gy.data[r * k + b] * inv;
                            let base = r * xv.cols + b * group_size;
                            for d in &mut dx.data[base..base + group_size] {
                                *d = g;
                            }
                        }
                    }
                    add_to(*x, dx, head);
                }
                Op::Custom { x, map } => {
                    add_to(*x, map.adjoint(gy), head);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adam hyperparameters. The defaults match the training setups in this
/// repository (lr 3e-4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<(), AdError> {
        param.same_shape(grad, "adam_step")?;
        if param.len() != self.m.len() {
            return Err(AdError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape(),
                rhs: (1, self.m.len()),
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in param
            .data
            .iter_mut()
            .zip(&grad.data)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// How one block of pre-squash action coordinates maps to the bounded action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SquashBlock {
    /// Independent dims: `a = center + scale * tanh(u)`.
    Pointwise { dims: usize, scale: f64, center: f64 },
    /// Whole block squashed along its norm: `a = scale * u * tanh(|u|)/|u|`.
    /// Commutes with every orthogonal transform of the block.
    Radial { dims: usize, scale: f64 },
}

impl SquashBlock {
    pub fn dims(&self) -> usize {
        match self {
            SquashBlock::Pointwise { dims, .. } | SquashBlock::Radial { dims, .. } => *dims,
        }
    }
}

/// Block structure of the squashing map between pre-squash space and the
/// bounded action space.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashSpec {
    pub blocks: Vec<SquashBlock>,
}

const RADIAL_EPS: f64 = 1e-24;

impl SquashSpec {
    pub fn total_dims(&self) -> usize {
        self.blocks.iter().map(SquashBlock::dims).sum()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// One squash-space dim count per block, for expanding per-block
    /// parameters (like log-std) to per-dim rows.
    pub fn block_dim_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(SquashBlock::dims).collect()
    }
}

/// `a = squash(u)` recorded on the tape, `[B, d] -> [B, d]`.
pub fn squash(tape: &mut Tape, u: NodeId, spec: &SquashSpec) -> Result<NodeId, AdError> {
    let d = tape.value(u).cols;
    if d != spec.total_dims() {
        return Err(AdError::ShapeMismatch {
            op: "squash",
            lhs: tape.value(u).shape(),
            rhs: (tape.value(u).rows, spec.total_dims()),
        });
    }
    let mut parts: Option<NodeId> = None;
    let mut offset = 0;
    for block in &spec.blocks {
        let m = block.dims();
        let ub = tape.slice_cols(u, offset, m)?;
        let squashed = match *block {
            SquashBlock::Pointwise { scale, center, .. } => {
                let t = tape.tanh(ub);
                let s = tape.scale(t, scale);
                tape.add_scalar(s, center)
            }
            SquashBlock::Radial { scale, .. } => {
                let sq = tape.square(ub);
                let ss = tape.sum_cols(sq);
                let ss = tape.add_scalar(ss, RADIAL_EPS);
                let r = tape.sqrt(ss);
                let t = tape.tanh(r);
                let ratio = tape.div(t, r)?;
                let ratio_b = tape.broadcast_cols(ratio, m)?;
                let scaled = tape.mul(ub, ratio_b)?;
                tape.scale(scaled, scale)
            }
        };
        parts = Some(match parts {
            None => squashed,
            Some(acc) => tape.concat_cols(acc, squashed)?,
        });
        offset += m;
    }
    Ok(parts.expect("at least one block"))
}

/// Row-wise `log |det d squash/du|` evaluated at `u`, `[B, 1]`, including the
/// constant contribution of the scale factors.
pub fn squash_log_det(tape: &mut Tape, u: NodeId, spec: &SquashSpec) -> Result<NodeId, AdError> {
    let rows = tape.value(u).rows;
    let mut total: Option<NodeId> = None;
    let mut offset = 0;
    let ln2 = std::f64::consts::LN_2;
    // log(1 - tanh(x)^2) = 2 (ln 2 - x - softplus(-2x)), stable for large |x|.
    let mut log_sech2 = |tape: &mut Tape, x: NodeId| -> Result<NodeId, AdError> {
        let neg2x = tape.scale(x, -2.0);
        let sp = tape.softplus(neg2x);
        let xs = tape.add(x, sp)?;
        let neg = tape.neg(xs);
        let shifted = tape.add_scalar(neg, ln2);
        Ok(tape.scale(shifted, 2.0))
    };
    for block in &spec.blocks {
        let m = block.dims();
        let ub = tape.slice_cols(u, offset, m)?;
        let contribution = match *block {
            SquashBlock::Pointwise { scale, .. } => {
                let per_dim = log_sech2(tape, ub)?;
                let s = tape.sum_cols(per_dim);
                tape.add_scalar(s, m as f64 * scale.ln())
            }
            SquashBlock::Radial { scale, .. } => {
                let sq = tape.square(ub);
                let ss = tape.sum_cols(sq);
                let ss = tape.add_scalar(ss, RADIAL_EPS);
                let r = tape.sqrt(ss);
                // det J = tanh'(r) * (tanh(r)/r)^(m-1), times scale^m.
                let radial = log_sech2(tape, r)?;
                let t = tape.tanh(r);
                let ln_t = tape.ln(t);
                let ln_r = tape.ln(r);
                let ln_ratio = tape.sub(ln_t, ln_r)?;
                let tangential = tape.scale(ln_ratio, (m - 1) as f64);
                let s = tape.add(radial, tangential)?;
                tape.add_scalar(s, m as f64 * scale.ln())
            }
        };
        total = Some(match total {
            None => contribution,
            Some(acc) => tape.add(acc, contribution)?,
        });
        offset += m;
    }
    total.ok_or(AdError::InvalidArgument {
        op: "squash_log_det",
        message: format!("empty squash spec for {rows} rows"),
    })
}

/// Row-wise log-density of the squashed Gaussian: `log N(u; mu, sigma)` minus
/// the squash log-determinant at `u`. `sigma_row` is a `[1, d]` node of
/// per-dim standard deviations (already floored by the caller); `u` may be a
/// reparameterized sample or a constant unsquashed action.
pub fn gaussian_log_prob(
    tape: &mut Tape,
    u: NodeId,
    mu: NodeId,
    sigma_row: NodeId,
    spec: &SquashSpec,
) -> Result<NodeId, AdError> {
    let (rows, d) = tape.value(u).shape();
    if tape.value(sigma_row).shape() != (1, d) {
        return Err(AdError::ShapeMismatch {
            op: "gaussian_log_prob",
            lhs: tape.value(sigma_row).shape(),
            rhs: (1, d),
        });
    }
    let sigma_b = tape.broadcast_rows(sigma_row, rows)?;
    let diff = tape.sub(u, mu)?;
    let z = tape.div(diff, sigma_b)?;
    let z2 = tape.square(z);
    let quad = tape.sum_cols(z2);
    let quad = tape.scale(quad, -0.5);

    let ln_sigma = tape.ln(sigma_row);
    let ln_sigma_sum = tape.sum(ln_sigma);
    let ln_sigma_b = tape.broadcast_rows(ln_sigma_sum, rows)?;
    let ln_sigma_neg = tape.neg(ln_sigma_b);

    let base = tape.add(quad, ln_sigma_neg)?;
    let base = tape.add_scalar(base, -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());

    let log_det = squash_log_det(tape, u, spec)?;
    tape.sub(base, log_det)
}

/// Numeric inverse of [`squash`] for dataset actions. Values are nudged
/// strictly inside the bounds before `atanh`.
pub fn unsquash(action: &[f64], spec: &SquashSpec) -> Vec<f64> {
    const MARGIN: f64 = 1e-9;
    let mut out = Vec::with_capacity(action.len());
    let mut offset = 0;
    for block in &spec.blocks {
        match *block {
            SquashBlock::Pointwise {
                dims,
                scale,
                center,
            } => {
                for &a in &action[offset..offset + dims] {
                    let y = ((a - center) / scale).clamp(-1.0 + MARGIN, 1.0 - MARGIN);
                    out.push(y.atanh());
                }
                offset += dims;
            }
            SquashBlock::Radial { dims, scale } => {
                let y: Vec<f64> = action[offset..offset + dims]
                    .iter()
                    .map(|&a| a / scale)
                    .collect();
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    out.extend_from_slice(&y);
                } else {
                    let r = norm.min(1.0 - MARGIN).atanh();
                    out.extend(y.iter().map(|v| v * r / norm));
                }
                offset += dims;
            }
        }
    }
    out
}
