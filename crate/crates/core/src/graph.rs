//! Reverse-mode differentiation over a static graph of dense tensor primitives.
//!
//! A [`Graph`] is built once, node by node. Every node's parents are created
//! before it, so the node list is already in topological order. Named inputs
//! are bound at [`Graph::forward`] time; constants are fixed at construction.
//! [`Graph::backward`] walks the list in reverse and accumulates vector-Jacobian
//! products into each parent.
//!
//! Shapes are checked while the graph is built, so a malformed graph fails
//! before any arithmetic happens and the error names the offending node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest Euclidean distance used as a gradient denominator.
pub const DISTANCE_EPS: f64 = 1e-6;

/// Rows with a norm at or below this are rejected by the L2 normalization node.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over channel-major images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_cols(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Const,
    MatMul(NodeId, NodeId),
    MatMulTransposed(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowVector(NodeId, NodeId),
    SubColumn(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Hinge(NodeId),
    Sum(NodeId),
    MaskedRowSum(NodeId, Vec<f64>),
    MaskedRowMax(NodeId, Vec<bool>),
    MaskedRowMin(NodeId, Vec<bool>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2NormalizeRows(NodeId),
    PairwiseDistance(NodeId),
    Gather(NodeId, Vec<usize>),
    SliceRows(NodeId, usize, usize),
    StopGradient(NodeId),
    ArgmaxRows(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    GlobalAvgPool(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulTransposed(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowVector(..) => "add_row_vector",
            Op::SubColumn(..) => "sub_column",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Hinge(_) => "hinge",
            Op::Sum(_) => "sum",
            Op::MaskedRowSum(..) => "masked_row_sum",
            Op::MaskedRowMax(..) => "masked_row_max",
            Op::MaskedRowMin(..) => "masked_row_min",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::PairwiseDistance(_) => "pairwise_distance",
            Op::Gather(..) => "gather",
            Op::SliceRows(..) => "slice_rows",
            Op::StopGradient(_) => "stop_gradient",
            Op::ArgmaxRows(_) => "argmax_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Const => vec![],
            Op::MatMul(a, b)
            | Op::MatMulTransposed(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowVector(a, b)
            | Op::SubColumn(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Hinge(a)
            | Op::Sum(a)
            | Op::MaskedRowSum(a, _)
            | Op::MaskedRowMax(a, _)
            | Op::MaskedRowMin(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2NormalizeRows(a)
            | Op::PairwiseDistance(a)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _, _)
            | Op::StopGradient(a)
            | Op::ArgmaxRows(a)
            | Op::GlobalAvgPool(a, _) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    /// Column picked per row by masked max/min during the last forward pass.
    selected: Vec<Option<usize>>,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by input name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    strict: bool,
    evaluated: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// In strict mode, [`Graph::forward`] rejects non-finite input values.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input(_) => true,
            Op::Const | Op::StopGradient(_) => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value: None,
            selected: Vec::new(),
            requires_grad,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Const, shape);
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(a));
        let (k2, m) = rows_cols(self.shape(b));
        if k != k2 {
            return Err(self.mismatch("matmul", format!("inner dims {k} vs {k2}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![n, m]))
    }

    /// `a · bᵀ` for row-major `a: n×k`, `b: m×k`.
    pub fn matmul_transposed(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(a));
        let (m, k2) = rows_cols(self.shape(b));
        if k != k2 {
            return Err(self.mismatch("matmul_t", format!("inner dims {k} vs {k2}")));
        }
        Ok(self.push(Op::MatMulTransposed(a, b), vec![n, m]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// Adds a length-`c` vector to every row of an `n×c` matrix.
    pub fn add_row_vector(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(a));
        let len: usize = self.shape(v).iter().product();
        if len != c {
            return Err(self.mismatch("add_row_vector", format!("{c} columns vs vector {len}")));
        }
        Ok(self.push(Op::AddRowVector(a, v), vec![n, c]))
    }

    /// Subtracts `col[i]` from every entry of row `i`.
    pub fn sub_column(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(a));
        let len: usize = self.shape(col).iter().product();
        if len != n {
            return Err(self.mismatch("sub_column", format!("{n} rows vs column {len}")));
        }
        Ok(self.push(Op::SubColumn(a, col), vec![n, c]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), s)
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Offset(a, shift), s)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Relu(a), s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Log(a), s)
    }

    /// Elementwise `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Softplus(a), s)
    }

    /// Elementwise `max(0, x)` with the hinge convention of zero slope at 0.
    pub fn hinge(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Hinge(a), s)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    /// `y[i] = Σ_j w[i,j]·a[i,j]` with constant weights.
    pub fn masked_row_sum(&mut self, a: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(a));
        if weights.len() != n * c {
            return Err(self.mismatch("masked_row_sum", format!("weights {} vs {n}x{c}", weights.len())));
        }
        Ok(self.push(Op::MaskedRowSum(a, weights), vec![n]))
    }

    /// Row-wise maximum over the masked entries; rows with an empty mask yield 0.
    pub fn masked_row_max(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(a));
        if mask.len() != n * c {
            return Err(self.mismatch("masked_row_max", format!("mask {} vs {n}x{c}", mask.len())));
        }
        Ok(self.push(Op::MaskedRowMax(a, mask), vec![n]))
    }

    /// Row-wise minimum over the masked entries; rows with an empty mask yield 0.
    pub fn masked_row_min(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(a));
        if mask.len() != n * c {
            return Err(self.mismatch("masked_row_min", format!("mask {} vs {n}x{c}", mask.len())));
        }
        Ok(self.push(Op::MaskedRowMin(a, mask), vec![n]))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (n, c) = rows_cols(self.shape(a));
        self.push(Op::Softmax(a), vec![n, c])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (n, c) = rows_cols(self.shape(a));
        self.push(Op::LogSoftmax(a), vec![n, c])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (n, c) = rows_cols(self.shape(a));
        self.push(Op::L2NormalizeRows(a), vec![n, c])
    }

    /// Euclidean distance between every pair of rows.
    pub fn pairwise_distance(&mut self, a: NodeId) -> NodeId {
        let (n, _) = rows_cols(self.shape(a));
        self.push(Op::PairwiseDistance(a), vec![n, n])
    }

    /// Picks entries of the flattened tensor.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let len: usize = self.shape(a).iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(self.mismatch("gather", format!("index {bad} out of {len}")));
        }
        let n = index.len();
        Ok(self.push(Op::Gather(a, index), vec![n]))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(a));
        if start > end || end > n {
            return Err(self.mismatch("slice_rows", format!("{start}..{end} of {n} rows")));
        }
        Ok(self.push(Op::SliceRows(a, start, end), vec![end - start, c]))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::StopGradient(a), s)
    }

    /// Row-wise argmax as float indices. Not differentiable.
    pub fn argmax_rows(&mut self, a: NodeId) -> NodeId {
        let (n, _) = rows_cols(self.shape(a));
        self.push(Op::ArgmaxRows(a), vec![n])
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let (n, f) = rows_cols(self.shape(input));
        if f != geom.in_features() {
            return Err(self.mismatch("conv2d", format!("input features {f} vs {}", geom.in_features())));
        }
        let (wo, wi) = rows_cols(self.shape(weight));
        if wo != geom.out_channels || wi != geom.weight_cols() {
            return Err(self.mismatch(
                "conv2d",
                format!("weight {wo}x{wi} vs {}x{}", geom.out_channels, geom.weight_cols()),
            ));
        }
        let blen: usize = self.shape(bias).iter().product();
        if blen != geom.out_channels {
            return Err(self.mismatch("conv2d", format!("bias {blen} vs {}", geom.out_channels)));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.padding < geom.kernel {
            return Err(self.mismatch("conv2d", format!("bad geometry {geom:?}")));
        }
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            vec![n, geom.out_features()],
        ))
    }

    /// Averages each of `channels` contiguous blocks of a row.
    pub fn global_avg_pool(&mut self, a: NodeId, channels: usize) -> Result<NodeId> {
        let (n, f) = rows_cols(self.shape(a));
        if channels == 0 || f % channels != 0 {
            return Err(self.mismatch("global_avg_pool", format!("{f} features over {channels} channels")));
        }
        Ok(self.push(Op::GlobalAvgPool(a, channels), vec![n, channels]))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0].value.as_ref().ok_or(Error::NotEvaluated)
    }

    /// Gradient slot of a node after the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.as_ref().and_then(Tensor::grad)
    }

    /// Evaluates every node, in construction order, with the given bindings.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<()> {
        if let Some(name) = inputs.keys().find(|k| !self.inputs.contains_key(*k)) {
            return Err(Error::UnknownInput(name.clone()));
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Const) {
                if let Some(v) = self.nodes[i].value.as_mut() {
                    v.clear_grad();
                }
                continue;
            }
            let value = match &self.nodes[i].op {
                Op::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            node: i,
                            op: "input",
                            detail: format!(
                                "`{name}` bound to {:?}, declared {:?}",
                                t.shape(),
                                self.nodes[i].shape
                            ),
                        });
                    }
                    if self.strict && !t.is_finite() {
                        return Err(Error::NonFiniteInput(name.clone()));
                    }
                    let mut t = t.clone();
                    t.clear_grad();
                    t
                }
                _ => self.eval_node(i)?,
            };
            self.nodes[i].value = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Binds inputs, evaluates, and returns copies of the requested outputs.
    pub fn forward_eval(
        &mut self,
        inputs: &HashMap<String, Tensor>,
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        self.forward(inputs)?;
        outputs
            .iter()
            .map(|&id| {
                let mut t = self.value(id)?.clone();
                t.clear_grad();
                Ok(t)
            })
            .collect()
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parents are evaluated first")
    }

    fn eval_node(&mut self, i: usize) -> Result<Tensor> {
        let shape = self.nodes[i].shape.clone();
        // taken out for the duration of the evaluation
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Const);
        let out = self.compute(i, &op);
        self.nodes[i].op = op;
        Tensor::new(shape, out?)
    }

    fn compute(&mut self, i: usize, op: &Op) -> Result<Vec<f64>> {
        let out = match *op {
            Op::Input(_) | Op::Const => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (n, k) = rows_cols(av.shape());
                let m = bv.cols();
                let mut out = vec![0.0; n * m];
                matmul_into(av.data(), bv.data(), &mut out, n, k, m);
                out
            }
            Op::MatMulTransposed(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (n, k) = rows_cols(av.shape());
                let m = bv.rows();
                let mut out = vec![0.0; n * m];
                for r in 0..n {
                    let ar = &av.data()[r * k..(r + 1) * k];
                    for c in 0..m {
                        let br = &bv.data()[c * k..(c + 1) * k];
                        out[r * m + c] = dot(ar, br);
                    }
                }
                out
            }
            Op::Add(a, b) => zip_map(self.val(a), self.val(b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(self.val(a), self.val(b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(self.val(a), self.val(b), |x, y| x * y),
            Op::AddRowVector(a, v) => {
                let (av, vv) = (self.val(a), self.val(v));
                let c = vv.len();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(idx, x)| x + vv.data()[idx % c])
                    .collect()
            }
            Op::SubColumn(a, col) => {
                let (av, cv) = (self.val(a), self.val(col));
                let c = av.cols();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(idx, x)| x - cv.data()[idx / c])
                    .collect()
            }
            Op::Scale(a, f) => self.val(a).data().iter().map(|x| x * f).collect(),
            Op::Offset(a, s) => self.val(a).data().iter().map(|x| x + s).collect(),
            Op::Relu(a) | Op::Hinge(a) => self.val(a).data().iter().map(|x| x.max(0.0)).collect(),
            Op::Exp(a) => self.val(a).data().iter().map(|x| x.exp()).collect(),
            Op::Log(a) => self.val(a).data().iter().map(|x| x.ln()).collect(),
            Op::Softplus(a) => self.val(a).data().iter().map(|&x| softplus(x)).collect(),
            Op::Sum(a) => vec![self.val(a).data().iter().sum()],
            Op::MaskedRowSum(a, ref w) => {
                let av = self.val(a);
                let c = av.cols();
                (0..av.rows())
                    .map(|r| dot(av.row(r), &w[r * c..(r + 1) * c]))
                    .collect()
            }
            Op::MaskedRowMax(a, ref mask) | Op::MaskedRowMin(a, ref mask) => {
                let want_max = matches!(op, Op::MaskedRowMax(..));
                let av = self.val(a);
                let c = av.cols();
                let mut selected = Vec::with_capacity(av.rows());
                let mut out = Vec::with_capacity(av.rows());
                for r in 0..av.rows() {
                    let row = av.row(r);
                    let mut best: Option<usize> = None;
                    for j in 0..c {
                        if !mask[r * c + j] {
                            continue;
                        }
                        best = match best {
                            None => Some(j),
                            Some(b) if want_max && row[j] > row[b] => Some(j),
                            Some(b) if !want_max && row[j] < row[b] => Some(j),
                            keep => keep,
                        };
                    }
                    out.push(best.map_or(0.0, |j| row[j]));
                    selected.push(best);
                }
                self.nodes[i].selected = selected;
                out
            }
            Op::Softmax(a) => {
                let av = self.val(a);
                let mut out = Vec::with_capacity(av.len());
                for r in 0..av.rows() {
                    out.extend(softmax_row(av.row(r)));
                }
                out
            }
            Op::LogSoftmax(a) => {
                let av = self.val(a);
                let mut out = Vec::with_capacity(av.len());
                for r in 0..av.rows() {
                    let row = av.row(r);
                    let lse = log_sum_exp(row);
                    out.extend(row.iter().map(|x| x - lse));
                }
                out
            }
            Op::L2NormalizeRows(a) => {
                let av = self.val(a);
                let mut out = Vec::with_capacity(av.len());
                for r in 0..av.rows() {
                    let row = av.row(r);
                    let norm = dot(row, row).sqrt();
                    if norm.is_nan() || norm <= ZERO_NORM {
                        return Err(Error::ZeroNormRow { row: r });
                    }
                    out.extend(row.iter().map(|x| x / norm));
                }
                out
            }
            Op::PairwiseDistance(a) => {
                let av = self.val(a);
                let n = av.rows();
                let mut out = vec![0.0; n * n];
                for r in 0..n {
                    for c in (r + 1)..n {
                        let d = euclidean(av.row(r), av.row(c));
                        out[r * n + c] = d;
                        out[c * n + r] = d;
                    }
                }
                out
            }
            Op::Gather(a, ref index) => {
                let av = self.val(a).data();
                index.iter().map(|&k| av[k]).collect()
            }
            Op::SliceRows(a, start, end) => {
                let av = self.val(a);
                let c = av.cols();
                av.data()[start * c..end * c].to_vec()
            }
            Op::StopGradient(a) => self.val(a).data().to_vec(),
            Op::ArgmaxRows(a) => self
                .val(a)
                .argmax_rows()
                .into_iter()
                .map(|k| k as f64)
                .collect(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => conv2d_forward(self.val(input), self.val(weight), self.val(bias), &geom),
            Op::GlobalAvgPool(a, channels) => {
                let av = self.val(a);
                let spatial = av.cols() / channels;
                let mut out = Vec::with_capacity(av.rows() * channels);
                for r in 0..av.rows() {
                    let row = av.row(r);
                    for ch in 0..channels {
                        let s: f64 = row[ch * spatial..(ch + 1) * spatial].iter().sum();
                        out.push(s / spatial as f64);
                    }
                }
                out
            }
        };
        Ok(out)
    }

    /// Propagates `seed` from `output` back to every input.
    ///
    /// Gradient slots are reset at the start of the pass; within the pass,
    /// contributions from multiple uses of a node accumulate.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        if seed.shape() != self.nodes[output.0].shape.as_slice() {
            return Err(Error::ShapeMismatch {
                node: output.0,
                op: "seed",
                detail: format!("seed {:?} vs output {:?}", seed.shape(), self.nodes[output.0].shape),
            });
        }
        for node in &mut self.nodes {
            if let Some(v) = node.value.as_mut() {
                v.clear_grad();
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if let Some(v) = self.nodes[i].value.as_mut() {
                v.set_grad(g)?;
            }
        }

        let mut by_name = HashMap::new();
        for (name, &id) in &self.inputs {
            let t = self.val(id);
            let g = t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            by_name.insert(name.clone(), Tensor::new(t.shape().to_vec(), g)?);
        }
        Ok(Gradients { by_name })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>| {
            match grads[id.0].as_mut() {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&delta) {
                        *a += b;
                    }
                }
                None => grads[id.0] = Some(delta),
            }
        };
        let y = node.value.as_ref().ok_or(Error::NotEvaluated)?.data();

        match node.op {
            Op::Input(_) | Op::Const | Op::StopGradient(_) => {}
            Op::ArgmaxRows(_) => {
                return Err(Error::NotDifferentiable {
                    node: i,
                    op: node.op.name(),
                })
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (n, k) = rows_cols(av.shape());
                let m = bv.cols();
                if wants(a) {
                    // g (n×m) · bᵀ (m×k)
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            ga[r * k + c] = dot(&g[r * m..(r + 1) * m], &bv.data()[c * m..(c + 1) * m]);
                        }
                    }
                    acc(grads, a, ga);
                }
                if wants(b) {
                    // aᵀ (k×n) · g (n×m)
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        let arow = &av.data()[r * k..(r + 1) * k];
                        let grow = &g[r * m..(r + 1) * m];
                        for (p, &ap) in arow.iter().enumerate() {
                            if ap == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * m..(p + 1) * m];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += ap * gv;
                            }
                        }
                    }
                    acc(grads, b, gb);
                }
            }
            Op::MatMulTransposed(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (n, k) = rows_cols(av.shape());
                let m = bv.rows();
                if wants(a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_into(g, bv.data(), &mut ga, n, m, k);
                    acc(grads, a, ga);
                }
                if wants(b) {
                    // gᵀ (m×n) · a (n×k)
                    let mut gb = vec![0.0; m * k];
                    for r in 0..n {
                        let arow = &av.data()[r * k..(r + 1) * k];
                        for c in 0..m {
                            let gv = g[r * m + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[c * k..(c + 1) * k];
                            for (d, &ap) in dst.iter_mut().zip(arow) {
                                *d += gv * ap;
                            }
                        }
                    }
                    acc(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(grads, a, g.to_vec());
                }
                if wants(b) {
                    acc(grads, b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(grads, a, g.to_vec());
                }
                if wants(b) {
                    acc(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                if wants(a) {
                    acc(grads, a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    acc(grads, b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRowVector(a, v) => {
                if wants(a) {
                    acc(grads, a, g.to_vec());
                }
                if wants(v) {
                    let c = self.val(v).len();
                    let mut gv = vec![0.0; c];
                    for (idx, x) in g.iter().enumerate() {
                        gv[idx % c] += x;
                    }
                    acc(grads, v, gv);
                }
            }
            Op::SubColumn(a, col) => {
                if wants(a) {
                    acc(grads, a, g.to_vec());
                }
                if wants(col) {
                    let c = self.val(a).cols();
                    let gc = g.chunks(c).map(|row| -row.iter().sum::<f64>()).collect();
                    acc(grads, col, gc);
                }
            }
            Op::Scale(a, f) => acc(grads, a, g.iter().map(|x| x * f).collect()),
            Op::Offset(a, _) => acc(grads, a, g.to_vec()),
            Op::Relu(a) | Op::Hinge(a) => {
                let x = self.val(a).data();
                acc(
                    grads,
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => acc(grads, a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()),
            Op::Log(a) => {
                let x = self.val(a).data();
                acc(grads, a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
            }
            Op::Softplus(a) => {
                let x = self.val(a).data();
                acc(grads, a, g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect());
            }
            Op::Sum(a) => {
                let len = self.val(a).len();
                acc(grads, a, vec![g[0]; len]);
            }
            Op::MaskedRowSum(a, ref w) => {
                let c = self.val(a).cols();
                let ga = w
                    .iter()
                    .enumerate()
                    .map(|(idx, wv)| wv * g[idx / c])
                    .collect();
                acc(grads, a, ga);
            }
            Op::MaskedRowMax(a, _) | Op::MaskedRowMin(a, _) => {
                let av = self.val(a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                for (r, sel) in node.selected.iter().enumerate() {
                    if let Some(j) = sel {
                        ga[r * c + j] += g[r];
                    }
                }
                acc(grads, a, ga);
            }
            Op::Softmax(a) => {
                let c = node.shape[1];
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let s = dot(gr, yr);
                    ga.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - s)));
                }
                acc(grads, a, ga);
            }
            Op::LogSoftmax(a) => {
                let c = node.shape[1];
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
                }
                acc(grads, a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.val(a);
                let c = x.cols();
                let mut ga = Vec::with_capacity(g.len());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let norm = dot(xr, xr).sqrt();
                    let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    let proj = dot(gr, yr);
                    ga.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * proj) / norm));
                }
                acc(grads, a, ga);
            }
            Op::PairwiseDistance(a) => {
                let x = self.val(a);
                let (n, c) = (x.rows(), x.cols());
                let mut ga = vec![0.0; x.len()];
                for r in 0..n {
                    for s in 0..n {
                        if r == s {
                            continue;
                        }
                        let coef = g[r * n + s] / y[r * n + s].max(DISTANCE_EPS);
                        let (xr, xs) = (x.row(r), x.row(s));
                        for k in 0..c {
                            let diff = coef * (xr[k] - xs[k]);
                            ga[r * c + k] += diff;
                            ga[s * c + k] -= diff;
                        }
                    }
                }
                acc(grads, a, ga);
            }
            Op::Gather(a, ref index) => {
                let mut ga = vec![0.0; self.val(a).len()];
                for (&k, gv) in index.iter().zip(g) {
                    ga[k] += gv;
                }
                acc(grads, a, ga);
            }
            Op::SliceRows(a, start, _) => {
                let av = self.val(a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                acc(grads, a, ga);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) =
                    conv2d_backward(self.val(input), self.val(weight), g, &geom);
                if wants(input) {
                    acc(grads, input, gi);
                }
                if wants(weight) {
                    acc(grads, weight, gw);
                }
                if wants(bias) {
                    acc(grads, bias, gb);
                }
            }
            Op::GlobalAvgPool(a, channels) => {
                let av = self.val(a);
                let spatial = av.cols() / channels;
                let mut ga = Vec::with_capacity(av.len());
                for r in 0..av.rows() {
                    for ch in 0..channels {
                        let v = g[r * channels + ch] / spatial as f64;
                        ga.extend(std::iter::repeat_n(v, spatial));
                    }
                }
                acc(grads, a, ga);
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// `out (n×m) += a (n×k) · b (k×m)`, row-major.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let wcols = geom.weight_cols();
    let n = input.rows();
    let mut out = vec![0.0; n * geom.out_features()];
    for s in 0..n {
        let x = input.row(s);
        let o = &mut out[s * geom.out_features()..(s + 1) * geom.out_features()];
        for oc in 0..geom.out_channels {
            let wrow = &weight.data()[oc * wcols..(oc + 1) * wcols];
            let b = bias.data()[oc];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b;
                    for ic in 0..geom.in_channels {
                        for ky in 0..k {
                            let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                acc += wrow[(ic * k + ky) * k + kx]
                                    * x[(ic as isize * h + iy) as usize * w as usize + ix as usize];
                            }
                        }
                    }
                    o[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &[f64],
    geom: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let wcols = geom.weight_cols();
    let fin = geom.in_features();
    let fout = geom.out_features();
    let n = input.rows();
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; geom.out_channels];
    for s in 0..n {
        let x = input.row(s);
        let gs = &g[s * fout..(s + 1) * fout];
        let gx = &mut gi[s * fin..(s + 1) * fin];
        for oc in 0..geom.out_channels {
            let wrow = &weight.data()[oc * wcols..(oc + 1) * wcols];
            let gwrow = &mut gw[oc * wcols..(oc + 1) * wcols];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = gs[(oc * ho + oy) * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    gb[oc] += go;
                    for ic in 0..geom.in_channels {
                        for ky in 0..k {
                            let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                let xi = (ic as isize * h + iy) as usize * w as usize + ix as usize;
                                let wi = (ic * k + ky) * k + kx;
                                gwrow[wi] += go * x[xi];
                                gx[xi] += go * wrow[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}
