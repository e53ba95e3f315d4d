use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(kind: &str, slope: f64) -> Result<Self> {
        match kind {
            "leaky_relu" => Ok(Activation::LeakyRelu { slope }),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given input `x` and output `y`; kinks take the right-hand slope.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulCol,
    MulConst,
    Scale,
    AddScalar,
    Activation,
    SoftmaxScaled,
    MaskedSoftmax,
    LogSoftmax,
    Transpose,
    ConcatCols,
    ConcatRows,
    SliceCols,
    GatherRows,
    SegmentSum,
    SegmentSoftmax,
    SegmentMax,
    EdgeWeightedSum,
    SumAll,
    MeanRows,
    RowDot,
    PickPerRow,
    RowNormalize,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulCol => "mul_col",
            OpKind::MulConst => "mul_const",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Activation => "activation",
            OpKind::SoftmaxScaled => "softmax_scaled",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Transpose => "transpose",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::SegmentSum => "segment_sum",
            OpKind::SegmentSoftmax => "segment_softmax",
            OpKind::SegmentMax => "segment_max",
            OpKind::EdgeWeightedSum => "edge_weighted_sum",
            OpKind::SumAll => "sum",
            OpKind::MeanRows => "mean_rows",
            OpKind::RowDot => "row_dot",
            OpKind::PickPerRow => "pick_per_row",
            OpKind::RowNormalize => "row_normalize",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 28] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddRow,
    OpKind::MulCol,
    OpKind::MulConst,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Activation,
    OpKind::SoftmaxScaled,
    OpKind::MaskedSoftmax,
    OpKind::LogSoftmax,
    OpKind::Transpose,
    OpKind::ConcatCols,
    OpKind::ConcatRows,
    OpKind::SliceCols,
    OpKind::GatherRows,
    OpKind::SegmentSum,
    OpKind::SegmentSoftmax,
    OpKind::SegmentMax,
    OpKind::EdgeWeightedSum,
    OpKind::SumAll,
    OpKind::MeanRows,
    OpKind::RowDot,
    OpKind::PickPerRow,
    OpKind::RowNormalize,
];

/// Test hook: deliberately corrupt the backward rule of one op kind.
pub mod fault {
    use super::OpKind;
    use std::cell::Cell;

    thread_local! {
        static CORRUPT: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    pub fn corrupt(kind: Option<OpKind>) {
        CORRUPT.with(|c| c.set(kind));
    }

    pub(super) fn active() -> Option<OpKind> {
        CORRUPT.with(|c| c.get())
    }
}

type Index = Arc<[usize]>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    SoftmaxScaled(Var, f64),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Index),
    SegmentSum(Var, Index),
    SegmentSoftmax(Var, Index),
    SegmentMax(Var, Vec<Option<usize>>),
    EdgeWeightedSum {
        values: Var,
        weights: Var,
        src: Index,
        dst: Index,
    },
    SumAll(Var),
    MeanRows(Var),
    RowDot(Var, Var),
    PickPerRow(Var, Vec<usize>),
    RowNormalize(Var, Vec<f64>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Act(..) => OpKind::Activation,
            Op::SoftmaxScaled(..) => OpKind::SoftmaxScaled,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::SegmentSum(..) => OpKind::SegmentSum,
            Op::SegmentSoftmax(..) => OpKind::SegmentSoftmax,
            Op::SegmentMax(..) => OpKind::SegmentMax,
            Op::EdgeWeightedSum { .. } => OpKind::EdgeWeightedSum,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::RowDot(..) => OpKind::RowDot,
            Op::PickPerRow(..) => OpKind::PickPerRow,
            Op::RowNormalize(..) => OpKind::RowNormalize,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations and replays them in reverse.
///
/// Values are immutable once recorded. Gradients from the most recent
/// [`Tape::backward`] are kept until the next reset or backward call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(Error::shape(op, t.shape(), &[]))
    }
}

fn check_index(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::contract(format!(
            "{op}: index {bad} out of bounds for {bound} rows"
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.backward_done = false;
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward's loss w.r.t. `v`; zeros when unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_matrix("matmul", ta)?;
        let (k2, n) = check_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[m x n] + row[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, n) = check_matrix("add_row", tx)?;
        if tr.shape() != [1, n] {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x[m x n] * col[m x 1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (m, n) = check_matrix("mul_col", tx)?;
        if tc.shape() != [m, 1] {
            return Err(Error::shape("mul_col", tx.shape(), tc.shape()));
        }
        let mut out = tx.clone();
        if n > 0 {
            for (chunk, c) in out.data_mut().chunks_mut(n).zip(tc.data()) {
                chunk.iter_mut().for_each(|o| *o *= c);
            }
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(out, Op::MulCol(x, col), rg))
    }

    /// Elementwise product with a constant tensor (masks, fixed scalings).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    /// Applies a keep-mask with inverted-dropout rescaling `1 / (1 - rate)`.
    pub fn dropout_mask(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::contract("dropout mask length differs from input"));
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        let s = 1.0 / (1.0 - rate);
        let mask = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let c = Tensor::new(self.shape(x).to_vec(), mask)?;
        self.mul_const(x, c)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        let rg = self.rg(x);
        self.push(out, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu { slope })
    }

    // ---- normalisations -------------------------------------------------

    /// Softmax of `x / scale` along the last axis, max-subtracted.
    pub fn softmax_scaled(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::contract(format!("softmax scale must be > 0, got {scale}")));
        }
        let mut out = self.value(x).clone();
        let n = out.cols();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row, scale);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxScaled(x, scale), rg))
    }

    /// Row softmax restricted to entries where `mask` is true; fully masked
    /// rows produce zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = check_matrix("masked_softmax", tx)?;
        if mask.len() != tx.numel() {
            return Err(Error::contract("masked_softmax: mask length differs from input"));
        }
        let mut out = tx.clone();
        if n > 0 {
            for (row, m) in out.data_mut().chunks_mut(n).zip(mask.chunks(n)) {
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                let mut sum = 0.0;
                for (v, &k) in row.iter_mut().zip(m) {
                    *v = if k { (*v - max).exp() } else { 0.0 };
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.cols();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// L2-normalises each row; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                norms.push(norm);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowNormalize(x, norms), rg))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (m, _) = check_matrix("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = check_matrix("concat_cols", self.value(p))?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, n) = check_matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = check_matrix("concat_rows", self.value(p))?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = check_matrix("slice_cols", tx)?;
        if start + len > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of {n} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols(x, start), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Index = idx.into();
        let tx = self.value(x);
        check_matrix("gather_rows", tx)?;
        check_index("gather_rows", &idx, tx.rows())?;
        let out = tx.select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg))
    }

    /// `out[s] = sum of x[e]` over rows `e` with `seg[e] == s`.
    pub fn segment_sum(&mut self, x: Var, seg: impl Into<Arc<[usize]>>, segments: usize) -> Result<Var> {
        let seg: Index = seg.into();
        let tx = self.value(x);
        let (m, n) = check_matrix("segment_sum", tx)?;
        if seg.len() != m {
            return Err(Error::shape("segment_sum", tx.shape(), &[seg.len()]));
        }
        check_index("segment_sum", &seg, segments)?;
        let mut out = vec![0.0; segments * n];
        for (e, &s) in seg.iter().enumerate() {
            for (o, v) in out[s * n..(s + 1) * n].iter_mut().zip(tx.row(e)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(segments, n, out)?, Op::SegmentSum(x, seg), rg))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: impl Into<Arc<[usize]>>, segments: usize) -> Result<Var> {
        let seg: Index = seg.into();
        let tx = self.value(x);
        let (m, n) = check_matrix("segment_softmax", tx)?;
        if seg.len() != m {
            return Err(Error::shape("segment_softmax", tx.shape(), &[seg.len()]));
        }
        check_index("segment_softmax", &seg, segments)?;
        let mut max = vec![f64::NEG_INFINITY; segments * n];
        for (e, &s) in seg.iter().enumerate() {
            for (mx, v) in max[s * n..(s + 1) * n].iter_mut().zip(tx.row(e)) {
                *mx = mx.max(*v);
            }
        }
        let mut out = tx.clone();
        let mut sum = vec![0.0; segments * n];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..n {
                let v = (out.data()[e * n + j] - max[s * n + j]).exp();
                out.data_mut()[e * n + j] = v;
                sum[s * n + j] += v;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..n {
                out.data_mut()[e * n + j] /= sum[s * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentSoftmax(x, seg), rg))
    }

    /// Per-segment column-wise maximum; empty segments give zeros.
    pub fn segment_max(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = check_matrix("segment_max", tx)?;
        if seg.len() != m {
            return Err(Error::shape("segment_max", tx.shape(), &[seg.len()]));
        }
        check_index("segment_max", seg, segments)?;
        let mut arg: Vec<Option<usize>> = vec![None; segments * n];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..n {
                let slot = &mut arg[s * n + j];
                match *slot {
                    Some(best) if tx.data()[best * n + j] >= tx.data()[e * n + j] => {}
                    _ => *slot = Some(e),
                }
            }
        }
        let out: Vec<f64> = arg
            .iter()
            .enumerate()
            .map(|(k, a)| a.map_or(0.0, |e| tx.data()[e * n + k % n]))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(segments, n, out)?, Op::SegmentMax(x, arg), rg))
    }

    /// Weighted neighbourhood sum: `out[dst[e]] += weights[e] * values[src[e]]`.
    pub fn edge_weighted_sum(
        &mut self,
        values: Var,
        weights: Var,
        src: impl Into<Arc<[usize]>>,
        dst: impl Into<Arc<[usize]>>,
        segments: usize,
    ) -> Result<Var> {
        let (src, dst): (Index, Index) = (src.into(), dst.into());
        let (tv, tw) = (self.value(values), self.value(weights));
        let (_, n) = check_matrix("edge_weighted_sum", tv)?;
        if tw.shape() != [src.len(), 1] || src.len() != dst.len() {
            return Err(Error::shape("edge_weighted_sum", tw.shape(), &[src.len(), 1]));
        }
        check_index("edge_weighted_sum", &src, tv.rows())?;
        check_index("edge_weighted_sum", &dst, segments)?;
        let mut out = vec![0.0; segments * n];
        for e in 0..src.len() {
            let w = tw.data()[e];
            for (o, v) in out[dst[e] * n..(dst[e] + 1) * n].iter_mut().zip(tv.row(src[e])) {
                *o += w * v;
            }
        }
        let rg = self.rg(values) || self.rg(weights);
        Ok(self.push(
            Tensor::matrix(segments, n, out)?,
            Op::EdgeWeightedSum {
                values,
                weights,
                src,
                dst,
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of every element, as a `1 x 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Column means over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = check_matrix("mean_rows", tx)?;
        if m == 0 {
            return Err(Error::contract("mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(x), rg))
    }

    /// Row-wise inner products: `[m x n], [m x n] -> [m x 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, _) = check_matrix("row_dot", ta)?;
        let out = (0..m)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::column(out), Op::RowDot(a, b), rg))
    }

    /// Picks `x[i, cols[i]]` for each row: `[m x n] -> [m x 1]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = check_matrix("pick_per_row", tx)?;
        if cols.len() != m {
            return Err(Error::shape("pick_per_row", tx.shape(), &[cols.len()]));
        }
        check_index("pick_per_row", cols, n)?;
        let out = cols.iter().enumerate().map(|(i, &c)| tx.get(i, c)).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(out), Op::PickPerRow(x, cols.to_vec()), rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradients of the scalar `loss` w.r.t. every recorded node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without a new forward pass"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let corrupt = fault::active();
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                self.grads[idx] = Some(g);
                continue;
            }
            if corrupt == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let (rows, cols) = (out.rows(), out.cols());
        // Each arm computes parent contributions from `g` (same shape as `out`).
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = cols;
                self.accumulate(a, |ga, ns| gemm(m, n, k, g, false, ns[b.0].value.data(), true, ga, 1.0));
                self.accumulate(b, |gb, ns| gemm(k, m, n, ns[a.0].value.data(), true, g, false, gb, 1.0));
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                self.accumulate(a, |ga, ns| {
                    for ((o, v), y) in ga.iter_mut().zip(g).zip(ns[b.0].value.data()) {
                        *o += v * y;
                    }
                });
                self.accumulate(b, |gb, ns| {
                    for ((o, v), x) in gb.iter_mut().zip(g).zip(ns[a.0].value.data()) {
                        *o += v * x;
                    }
                });
            }
            &Op::AddRow(x, r) => {
                self.accumulate(x, |gx, _| add_into(gx, g));
                self.accumulate(r, |gr, _| {
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::MulCol(x, c) => {
                self.accumulate(x, |gx, ns| {
                    let cv = ns[c.0].value.data();
                    for (i, (o, gi)) in gx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        o.iter_mut().zip(gi).for_each(|(o, v)| *o += v * cv[i]);
                    }
                });
                self.accumulate(c, |gc, ns| {
                    let xv = &ns[x.0].value;
                    for i in 0..rows {
                        gc[i] += xv
                            .row(i)
                            .iter()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::MulConst(x, c) => {
                let x = *x;
                let c = c.data().to_vec();
                self.accumulate(x, |gx, _| {
                    for ((o, v), k) in gx.iter_mut().zip(g).zip(&c) {
                        *o += v * k;
                    }
                });
            }
            &Op::Scale(x, s) => {
                self.accumulate(x, |gx, _| gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v));
            }
            &Op::AddScalar(x) => self.accumulate(x, |gx, _| add_into(gx, g)),
            &Op::Act(x, act) => {
                self.accumulate(x, |gx, ns| {
                    let xv = ns[x.0].value.data();
                    let yv = ns[idx].value.data();
                    for i in 0..gx.len() {
                        gx[i] += g[i] * act.derivative(xv[i], yv[i]);
                    }
                });
            }
            &Op::SoftmaxScaled(x, scale) => {
                self.accumulate(x, |gx, ns| {
                    softmax_backward(gx, g, ns[idx].value.data(), cols, 1.0 / scale)
                });
            }
            &Op::MaskedSoftmax(x) => {
                self.accumulate(x, |gx, ns| softmax_backward(gx, g, ns[idx].value.data(), cols, 1.0));
            }
            &Op::LogSoftmax(x) => {
                self.accumulate(x, |gx, ns| {
                    let y = ns[idx].value.data();
                    for ((o, gi), yi) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = gi.iter().sum();
                        for j in 0..cols {
                            o[j] += gi[j] - yi[j].exp() * total;
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                self.accumulate(x, |gx, _| {
                    // out is rows x cols; input is cols x rows
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[j * rows + i] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accumulate(p, |gp, _| {
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * cols + offset..i * cols + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.accumulate(p, |gp, _| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceCols(x, start) => {
                let n = nodes[x.0].value.cols();
                self.accumulate(x, |gx, _| {
                    for i in 0..rows {
                        add_into(
                            &mut gx[i * n + start..i * n + start + cols],
                            &g[i * cols..(i + 1) * cols],
                        );
                    }
                });
            }
            Op::GatherRows(x, idxs) => {
                let (x, idxs) = (*x, idxs.clone());
                self.accumulate(x, |gx, _| {
                    for (e, &r) in idxs.iter().enumerate() {
                        add_into(&mut gx[r * cols..(r + 1) * cols], &g[e * cols..(e + 1) * cols]);
                    }
                });
            }
            Op::SegmentSum(x, seg) => {
                let (x, seg) = (*x, seg.clone());
                self.accumulate(x, |gx, _| {
                    for (e, &s) in seg.iter().enumerate() {
                        add_into(&mut gx[e * cols..(e + 1) * cols], &g[s * cols..(s + 1) * cols]);
                    }
                });
            }
            Op::SegmentSoftmax(x, seg) => {
                let (x, seg) = (*x, seg.clone());
                let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                self.accumulate(x, |gx, ns| {
                    let y = ns[idx].value.data();
                    let mut dot = vec![0.0; segments * cols];
                    for (e, &s) in seg.iter().enumerate() {
                        for j in 0..cols {
                            dot[s * cols + j] += g[e * cols + j] * y[e * cols + j];
                        }
                    }
                    for (e, &s) in seg.iter().enumerate() {
                        for j in 0..cols {
                            let k = e * cols + j;
                            gx[k] += y[k] * (g[k] - dot[s * cols + j]);
                        }
                    }
                });
            }
            Op::SegmentMax(x, arg) => {
                let x = *x;
                let arg = arg.clone();
                let n = cols;
                self.accumulate(x, |gx, _| {
                    for (k, a) in arg.iter().enumerate() {
                        if let Some(e) = a {
                            gx[e * n + k % n] += g[k];
                        }
                    }
                });
            }
            Op::EdgeWeightedSum {
                values,
                weights,
                src,
                dst,
            } => {
                let (values, weights, src, dst) = (*values, *weights, src.clone(), dst.clone());
                self.accumulate(values, |gv, ns| {
                    let w = ns[weights.0].value.data();
                    for e in 0..src.len() {
                        let (s, d) = (src[e], dst[e]);
                        for j in 0..cols {
                            gv[s * cols + j] += w[e] * g[d * cols + j];
                        }
                    }
                });
                self.accumulate(weights, |gw, ns| {
                    let v = &ns[values.0].value;
                    for e in 0..src.len() {
                        let d = dst[e];
                        gw[e] += v
                            .row(src[e])
                            .iter()
                            .zip(&g[d * cols..(d + 1) * cols])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            &Op::SumAll(x) => {
                let g0 = g[0];
                self.accumulate(x, |gx, _| gx.iter_mut().for_each(|o| *o += g0));
            }
            &Op::MeanRows(x) => {
                let m = nodes[x.0].value.rows();
                self.accumulate(x, |gx, _| {
                    for chunk in gx.chunks_mut(cols) {
                        chunk.iter_mut().zip(g).for_each(|(o, v)| *o += v / m as f64);
                    }
                });
            }
            &Op::RowDot(a, b) => {
                let n = nodes[a.0].value.cols();
                self.accumulate(a, |ga, ns| {
                    let bv = ns[b.0].value.data();
                    for i in 0..rows {
                        for j in 0..n {
                            ga[i * n + j] += g[i] * bv[i * n + j];
                        }
                    }
                });
                self.accumulate(b, |gb, ns| {
                    let av = ns[a.0].value.data();
                    for i in 0..rows {
                        for j in 0..n {
                            gb[i * n + j] += g[i] * av[i * n + j];
                        }
                    }
                });
            }
            Op::PickPerRow(x, picks) => {
                let x = *x;
                let picks = picks.clone();
                let n = nodes[x.0].value.cols();
                self.accumulate(x, |gx, _| {
                    for (i, &c) in picks.iter().enumerate() {
                        gx[i * n + c] += g[i];
                    }
                });
            }
            Op::RowNormalize(x, norms) => {
                let x = *x;
                let norms = norms.clone();
                self.accumulate(x, |gx, ns| {
                    let y = ns[idx].value.data();
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let r = i * cols..(i + 1) * cols;
                        let yg: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        for k in r {
                            gx[k] += (g[k] - y[k] * yg) / norm;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / scale).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `gx += inv_scale * y * (g - <g, y>)` row by row.
fn softmax_backward(gx: &mut [f64], g: &[f64], y: &[f64], cols: usize, inv_scale: f64) {
    if cols == 0 {
        return;
    }
    for ((o, gi), yi) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            o[j] += inv_scale * yi[j] * (gi[j] - dot);
        }
    }
}
