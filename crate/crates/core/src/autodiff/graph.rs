use std::sync::Arc;

use super::array::{Array, Scalar};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a named parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable leaf arrays, kept in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        self.names.push(name.into());
        self.arrays.push(value);
        ParamId(self.arrays.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<T>)> {
        self.names
            .iter()
            .zip(&self.arrays)
            .enumerate()
            .map(|(i, (n, a))| (ParamId(i), n.as_str(), a))
    }

    pub fn arrays(&self) -> &[Array<T>] {
        &self.arrays
    }

    pub fn element_count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Array::cast).collect(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(|a| Array::zeros(a.shape())).collect(),
        }
    }
}

/// Per-parameter gradients, shaped like the [`ParamSet`] they came from.
pub type Gradients<T> = ParamSet<T>;

#[derive(Clone, Debug)]
enum Op<T> {
    Input(String),
    Param(ParamId),
    Const(Arc<Array<T>>),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, T),
    Offset(NodeId, T),
    Square(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    CausalSoftmax(NodeId),
    RmsNorm(NodeId, T),
    Embed { table: NodeId, ids: Vec<usize> },
    PickCols { a: NodeId, cols: Vec<usize> },
    SliceRows { a: NodeId, start: usize, end: usize },
    SliceCols { a: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    Mse(NodeId, NodeId),
    StopGradient(NodeId),
    TopKMask { a: NodeId, k: usize },
    MaskUnion(NodeId, NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add-row",
            Op::MulRow(..) => "mul-row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log-sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log-softmax",
            Op::CausalSoftmax(_) => "causal-softmax",
            Op::RmsNorm(..) => "rms-norm",
            Op::Embed { .. } => "embed",
            Op::PickCols { .. } => "pick-cols",
            Op::SliceRows { .. } => "slice-rows",
            Op::SliceCols { .. } => "slice-cols",
            Op::ConcatCols(_) => "concat-cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum-rows",
            Op::MeanRows(_) => "mean-rows",
            Op::Mse(..) => "mse",
            Op::StopGradient(_) => "stop-gradient",
            Op::TopKMask { .. } => "top-k-mask",
            Op::MaskUnion(..) => "mask-union",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Values of every node after a forward pass.
#[derive(Clone, Debug)]
pub struct Values<T> {
    values: Vec<Array<T>>,
}

impl<T: Scalar> Values<T> {
    pub fn get(&self, id: NodeId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.values[id.0].item()
    }
}

/// Named input arrays bound at evaluation time.
pub type Inputs<'a, T> = [(&'a str, &'a Array<T>)];

/// Recorded computation over dense arrays.
///
/// Nodes are appended in topological order; every builder validates the
/// shapes of its inputs before the node is added. A graph is evaluated with
/// [`Graph::forward`] and differentiated with [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_id(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(shape_err(
                self.nodes.len(),
                op,
                format!("input node {} does not exist", id.0),
            ));
        }
        Ok(())
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        self.check_id(id, op)?;
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(
                self.nodes.len(),
                op,
                format!("expected a matrix, node {} has shape {s:?}", id.0),
            )),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        self.check_id(a, op)?;
        self.check_id(b, op)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(shape_err(
                self.nodes.len(),
                op,
                format!("operand shapes {sa:?} and {sb:?} differ"),
            ));
        }
        Ok(sa.clone())
    }

    fn unary(&mut self, a: NodeId, op: Op<T>) -> Result<NodeId> {
        let name = op.name();
        self.check_id(a, name)?;
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(op, shape, rg))
    }

    // ---- leaves ----

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Input(name.into()), shape.to_vec(), false)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        let shape = params.get(id).shape().to_vec();
        self.push(Op::Param(id), shape, true)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Array<T>>>) -> NodeId {
        let value = value.into();
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape, false)
    }

    pub fn scalar_const(&mut self, v: T) -> NodeId {
        self.constant(Array::scalar(v))
    }

    // ---- linear algebra ----

    /// `a · b` for `a: [n, k]`, `b: [k, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                self.nodes.len(),
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, trans_b: false }, vec![n, m], rg))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (m, k2) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                self.nodes.len(),
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, trans_b: true }, vec![n, m], rg))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), s, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), s, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), s, rg))
    }

    /// Elementwise quotient; a zero divisor surfaces as a non-finite error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "div")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), s, rg))
    }

    fn row_broadcast(&mut self, a: NodeId, row: NodeId, op: &'static str) -> Result<Vec<usize>> {
        self.check_id(a, op)?;
        self.check_id(row, op)?;
        let sa = self.nodes[a.0].shape.clone();
        let sr = &self.nodes[row.0].shape;
        let cols = sa.last().copied().unwrap_or(1);
        if sa.is_empty() || sr.len() != 1 || sr[0] != cols {
            return Err(shape_err(
                self.nodes.len(),
                op,
                format!("row vector {sr:?} does not broadcast over {sa:?}"),
            ));
        }
        Ok(sa)
    }

    /// Adds a length-`m` vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let s = self.row_broadcast(a, row, "add-row")?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), s, rg))
    }

    /// Multiplies every row of `a` elementwise by a length-`m` vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let s = self.row_broadcast(a, row, "mul-row")?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::MulRow(a, row), s, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.unary(a, Op::Offset(a, s))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::LogSigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::LogSoftmax(a))
    }

    /// Row softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "causal-softmax")?;
        if r != c {
            return Err(shape_err(
                self.nodes.len(),
                "causal-softmax",
                format!("score matrix must be square, got {r}x{c}"),
            ));
        }
        self.unary(a, Op::CausalSoftmax(a))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, a: NodeId, eps: T) -> Result<NodeId> {
        self.unary(a, Op::RmsNorm(a, eps))
    }

    // ---- indexing ----

    /// Gathers rows `ids` of a `[rows, d]` table into `[ids.len(), d]`.
    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let (rows, d) = self.dims2(table, "embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                self.nodes.len(),
                "embed",
                format!("row index {bad} out of range for table with {rows} rows"),
            ));
        }
        let rg = self.rg(table);
        let n = ids.len();
        Ok(self.push(Op::Embed { table, ids }, vec![n, d], rg))
    }

    /// Picks `a[i, cols[i]]` for every row `i`.
    pub fn pick_cols(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "pick-cols")?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(shape_err(
                self.nodes.len(),
                "pick-cols",
                format!("{} column indices for a {r}x{c} matrix", cols.len()),
            ));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::PickCols { a, cols }, vec![r], rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "slice-rows")?;
        if start > end || end > r {
            return Err(shape_err(
                self.nodes.len(),
                "slice-rows",
                format!("rows {start}..{end} out of 0..{r}"),
            ));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows { a, start, end }, vec![end - start, c], rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "slice-cols")?;
        if start > end || end > c {
            return Err(shape_err(
                self.nodes.len(),
                "slice-cols",
                format!("cols {start}..{end} out of 0..{c}"),
            ));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols { a, start, end }, vec![r, end - start], rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err(self.nodes.len(), "concat-cols", "no operands".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat-cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat-cols")?;
            if pr != r {
                return Err(shape_err(
                    self.nodes.len(),
                    "concat-cols",
                    format!("row counts {r} and {pr} differ"),
                ));
            }
            total += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, total], rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "sum")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), vec![], rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "mean")?;
        if self.nodes[a.0].shape.contains(&0) {
            return Err(shape_err(self.nodes.len(), "mean", "mean of an empty array".into()));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), vec![], rg))
    }

    /// Column sums of a `[n, m]` matrix, giving `[m]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims2(a, "sum-rows")?;
        let rg = self.rg(a);
        Ok(self.push(Op::SumRows(a), vec![c], rg))
    }

    /// Column means of a `[n, m]` matrix, giving `[m]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "mean-rows")?;
        if r == 0 {
            return Err(shape_err(self.nodes.len(), "mean-rows", "no rows to average".into()));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::MeanRows(a), vec![c], rg))
    }

    /// Mean squared difference of two same-shaped arrays.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mse")?;
        if s.contains(&0) {
            return Err(shape_err(self.nodes.len(), "mse", "mse of empty arrays".into()));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mse(a, b), vec![], rg))
    }

    // ---- gradient barriers ----

    /// Forwards its input unchanged; no gradient flows through it.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "stop-gradient")?;
        let s = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::StopGradient(a), s, false))
    }

    /// 0/1 indicator of the `k` largest entries of a vector (ties go to the
    /// smaller index). Index-producing, so it is not differentiable.
    pub fn top_k_mask(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        self.check_id(a, "top-k-mask")?;
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 1 {
            return Err(shape_err(
                self.nodes.len(),
                "top-k-mask",
                format!("expected a vector, got {s:?}"),
            ));
        }
        if k == 0 || k > s[0] {
            return Err(shape_err(
                self.nodes.len(),
                "top-k-mask",
                format!("k = {k} must lie in 1..={}", s[0]),
            ));
        }
        Ok(self.push(Op::TopKMask { a, k }, s, false))
    }

    /// Elementwise maximum of two index masks (set union).
    pub fn mask_union(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mask-union")?;
        Ok(self.push(Op::MaskUnion(a, b), s, false))
    }

    // ---- evaluation ----

    /// Evaluates every node in order.
    pub fn forward(&self, params: &ParamSet<T>, inputs: &Inputs<'_, T>) -> Result<Values<T>> {
        let mut values: Vec<Array<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = self.eval_node(idx, node, &values, params, inputs)?;
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(out);
        }
        Ok(Values { values })
    }

    fn eval_node(
        &self,
        idx: usize,
        node: &Node<T>,
        v: &[Array<T>],
        params: &ParamSet<T>,
        inputs: &Inputs<'_, T>,
    ) -> Result<Array<T>> {
        let shape = node.shape.clone();
        let out = match &node.op {
            Op::Input(name) => {
                let (_, arr) = inputs.iter().find(|(n, _)| n == name).ok_or_else(|| {
                    Error::MissingInput {
                        node: idx,
                        name: name.clone(),
                    }
                })?;
                if arr.shape() != shape.as_slice() {
                    return Err(shape_err(
                        idx,
                        "input",
                        format!("`{name}` bound with shape {:?}, declared {shape:?}", arr.shape()),
                    ));
                }
                (*arr).clone()
            }
            Op::Param(id) => {
                if id.0 >= params.len() || params.get(*id).shape() != shape.as_slice() {
                    return Err(shape_err(
                        idx,
                        "param",
                        format!("parameter {} missing or reshaped", id.0),
                    ));
                }
                params.get(*id).clone()
            }
            Op::Const(a) => (**a).clone(),
            Op::MatMul { a, b, trans_b } => {
                let (a, b) = (&v[a.0], &v[b.0]);
                let (n, k) = (a.rows(), a.cols());
                let m = shape[1];
                let mut out = vec![T::zero(); n * m];
                T::gemm(n, k, m, a.data(), false, b.data(), *trans_b, T::zero(), &mut out);
                Array::new(shape, out)?
            }
            Op::Add(a, b) => zip(&v[a.0], &v[b.0], |x, y| x + y),
            Op::Sub(a, b) => zip(&v[a.0], &v[b.0], |x, y| x - y),
            Op::Mul(a, b) => zip(&v[a.0], &v[b.0], |x, y| x * y),
            Op::Div(a, b) => zip(&v[a.0], &v[b.0], |x, y| x / y),
            Op::AddRow(a, r) => row_zip(&v[a.0], &v[r.0], |x, y| x + y),
            Op::MulRow(a, r) => row_zip(&v[a.0], &v[r.0], |x, y| x * y),
            Op::Scale(a, s) => v[a.0].map(|x| x * *s),
            Op::Offset(a, s) => v[a.0].map(|x| x + *s),
            Op::Square(a) => v[a.0].map(|x| x * x),
            Op::Relu(a) => v[a.0].map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::Sigmoid(a) => v[a.0].map(sigmoid),
            Op::LogSigmoid(a) => v[a.0].map(log_sigmoid),
            Op::Softmax(a) => {
                let mut out = v[a.0].clone();
                let c = out.cols();
                for row in out.data_mut().chunks_mut(c.max(1)) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LogSoftmax(a) => {
                let mut out = v[a.0].clone();
                let c = out.cols();
                for row in out.data_mut().chunks_mut(c.max(1)) {
                    log_softmax_in_place(row);
                }
                out
            }
            Op::CausalSoftmax(a) => {
                let mut out = v[a.0].clone();
                let c = out.cols();
                for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    for x in &mut row[i + 1..] {
                        *x = T::zero();
                    }
                }
                out
            }
            Op::RmsNorm(a, eps) => {
                let mut out = v[a.0].clone();
                let c = out.cols();
                for row in out.data_mut().chunks_mut(c) {
                    let r = rms(row, *eps);
                    for x in row.iter_mut() {
                        *x = *x / r;
                    }
                }
                out
            }
            Op::Embed { table, ids } => {
                let t = &v[table.0];
                let mut out = Vec::with_capacity(ids.len() * t.cols());
                for &i in ids {
                    out.extend_from_slice(t.row(i));
                }
                Array::new(shape, out)?
            }
            Op::PickCols { a, cols } => {
                let a = &v[a.0];
                Array::vector(cols.iter().enumerate().map(|(i, &j)| a.at(i, j)).collect())
            }
            Op::SliceRows { a, start, end } => {
                let a = &v[a.0];
                let c = a.cols();
                Array::new(shape, a.data()[start * c..end * c].to_vec())?
            }
            Op::SliceCols { a, start, end } => {
                let a = &v[a.0];
                let mut out = Vec::with_capacity(a.rows() * (end - start));
                for r in 0..a.rows() {
                    out.extend_from_slice(&a.row(r)[*start..*end]);
                }
                Array::new(shape, out)?
            }
            Op::ConcatCols(parts) => {
                let rows = shape[0];
                let mut out = Vec::with_capacity(rows * shape[1]);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(v[p.0].row(r));
                    }
                }
                Array::new(shape, out)?
            }
            Op::Sum(a) => Array::scalar(v[a.0].sum()),
            Op::Mean(a) => Array::scalar(v[a.0].sum() / T::of(v[a.0].len() as f64)),
            Op::SumRows(a) | Op::MeanRows(a) => {
                let a = &v[a.0];
                let c = a.cols();
                let mut out = vec![T::zero(); c];
                for r in 0..a.rows() {
                    for (o, &x) in out.iter_mut().zip(a.row(r)) {
                        *o += x;
                    }
                }
                if matches!(node.op, Op::MeanRows(_)) {
                    let n = T::of(a.rows() as f64);
                    for o in &mut out {
                        *o = *o / n;
                    }
                }
                Array::vector(out)
            }
            Op::Mse(a, b) => {
                let (a, b) = (&v[a.0], &v[b.0]);
                let s: T = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                Array::scalar(s / T::of(a.len() as f64))
            }
            Op::StopGradient(a) => v[a.0].clone(),
            Op::TopKMask { a, k } => {
                let a = &v[a.0];
                let mut mask = vec![T::zero(); a.len()];
                for i in top_k_indices(a.data(), *k) {
                    mask[i] = T::one();
                }
                Array::vector(mask)
            }
            Op::MaskUnion(a, b) => zip(&v[a.0], &v[b.0], T::max),
        };
        Ok(out)
    }

    /// Reverse-mode gradients of a scalar node with respect to all parameters.
    pub fn backward(
        &self,
        values: &Values<T>,
        loss: NodeId,
        params: &ParamSet<T>,
    ) -> Result<Gradients<T>> {
        let mut grads = params.zeros_like();
        self.backward_into(values, loss, T::one(), &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `scale · ∂loss/∂θ` into `grads`.
    pub fn backward_into(
        &self,
        values: &Values<T>,
        loss: NodeId,
        scale: T,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss node {} does not exist", loss.0)));
        }
        if values.values.len() != self.nodes.len() {
            return Err(Error::Contract("values do not belong to this graph".into()));
        }
        let loss_len = values.get(loss).len();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "loss node {} is not scalar (shape {:?})",
                loss.0,
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Array<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array::full(&self.nodes[loss.0].shape, scale));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(idx, node, &g, values, &mut adj, grads);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        node: &Node<T>,
        g: &Array<T>,
        values: &Values<T>,
        adj: &mut [Option<Array<T>>],
        grads: &mut Gradients<T>,
    ) {
        let val = |id: &NodeId| values.get(*id);
        let gd = g.data();
        match &node.op {
            Op::Input(_) | Op::Const(_) | Op::StopGradient(_) => {}
            Op::TopKMask { .. } | Op::MaskUnion(..) => {}
            Op::Param(id) => grads.get_mut(*id).add_assign(g),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let (n, k) = (av.rows(), av.cols());
                let m = node.shape[1];
                if self.rg(*a) {
                    let da = self.adj_buf(adj, *a);
                    if *trans_b {
                        T::gemm(n, m, k, gd, false, bv.data(), false, T::one(), da);
                    } else {
                        T::gemm(n, m, k, gd, false, bv.data(), true, T::one(), da);
                    }
                }
                if self.rg(*b) {
                    let db = self.adj_buf(adj, *b);
                    if *trans_b {
                        T::gemm(m, n, k, gd, true, av.data(), false, T::one(), db);
                    } else {
                        T::gemm(k, n, m, av.data(), true, gd, false, T::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(adj, *a, gd, |_, g| g);
                self.acc_map(adj, *b, gd, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.acc_map(adj, *a, gd, |_, g| g);
                self.acc_map(adj, *b, gd, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                self.acc_map(adj, *a, gd, |i, g| g * bv[i]);
                self.acc_map(adj, *b, gd, |i, g| g * av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                self.acc_map(adj, *a, gd, |i, g| g / bv[i]);
                self.acc_map(adj, *b, gd, |i, g| -g * av[i] / (bv[i] * bv[i]));
            }
            Op::AddRow(a, r) => {
                self.acc_map(adj, *a, gd, |_, g| g);
                if self.rg(*r) {
                    let c = val(r).len();
                    let dr = self.adj_buf(adj, *r);
                    for row in gd.chunks(c) {
                        for (d, &x) in dr.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(a).data(), val(r).data());
                let c = rv.len();
                self.acc_map(adj, *a, gd, |i, g| g * rv[i % c]);
                if self.rg(*r) {
                    let dr = self.adj_buf(adj, *r);
                    for (grow, arow) in gd.chunks(c).zip(av.chunks(c)) {
                        for j in 0..c {
                            dr[j] += grow[j] * arow[j];
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.acc_map(adj, *a, gd, |_, g| g * *s),
            Op::Offset(a, _) => self.acc_map(adj, *a, gd, |_, g| g),
            Op::Square(a) => {
                let av = val(a).data();
                let two = T::of(2.0);
                self.acc_map(adj, *a, gd, |i, g| g * two * av[i]);
            }
            Op::Relu(a) => {
                let av = val(a).data();
                self.acc_map(adj, *a, gd, |i, g| if av[i] > T::zero() { g } else { T::zero() });
            }
            Op::Sigmoid(a) => {
                let y = values.values[idx].data();
                self.acc_map(adj, *a, gd, |i, g| g * y[i] * (T::one() - y[i]));
            }
            Op::LogSigmoid(a) => {
                let av = val(a).data();
                self.acc_map(adj, *a, gd, |i, g| g * sigmoid(-av[i]));
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = values.values[idx].data();
                let c = node.shape.last().copied().unwrap_or(1).max(1);
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_map(adj, *a, &dx, |_, g| g);
            }
            Op::LogSoftmax(a) => {
                let y = values.values[idx].data();
                let c = node.shape.last().copied().unwrap_or(1).max(1);
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dxr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.acc_map(adj, *a, &dx, |_, g| g);
            }
            Op::RmsNorm(a, eps) => {
                let xv = val(a).data();
                let y = values.values[idx].data();
                let c = node.shape.last().copied().unwrap_or(1);
                let n = T::of(c as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (((dxr, yr), gr), xr) in dx
                    .chunks_mut(c)
                    .zip(y.chunks(c))
                    .zip(gd.chunks(c))
                    .zip(xv.chunks(c))
                {
                    let r = rms(xr, *eps);
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>() / n;
                    for j in 0..c {
                        dxr[j] = (gr[j] - yr[j] * dot) / r;
                    }
                }
                self.acc_map(adj, *a, &dx, |_, g| g);
            }
            Op::Embed { table, ids } => {
                if self.rg(*table) {
                    let d = node.shape[1];
                    let dt = self.adj_buf(adj, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::PickCols { a, cols } => {
                if self.rg(*a) {
                    let c = val(a).cols();
                    let da = self.adj_buf(adj, *a);
                    for (i, &j) in cols.iter().enumerate() {
                        da[i * c + j] += gd[i];
                    }
                }
            }
            Op::SliceRows { a, start, .. } => {
                if self.rg(*a) {
                    let c = node.shape[1];
                    let da = self.adj_buf(adj, *a);
                    for (d, &x) in da[start * c..].iter_mut().zip(gd) {
                        *d += x;
                    }
                }
            }
            Op::SliceCols { a, start, end } => {
                if self.rg(*a) {
                    let c = val(a).cols();
                    let w = end - start;
                    let da = self.adj_buf(adj, *a);
                    for r in 0..node.shape[0] {
                        for j in 0..w {
                            da[r * c + start + j] += gd[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if self.rg(*p) {
                        let dp = self.adj_buf(adj, *p);
                        for r in 0..node.shape[0] {
                            for j in 0..w {
                                dp[r * w + j] += gd[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.acc_map(adj, *a, &vec![g0; val(a).len()], |_, g| g);
            }
            Op::Mean(a) => {
                let n = val(a).len();
                let g0 = gd[0] / T::of(n as f64);
                self.acc_map(adj, *a, &vec![g0; n], |_, g| g);
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                if self.rg(*a) {
                    let (r, c) = (val(a).rows(), val(a).cols());
                    let s = if matches!(node.op, Op::MeanRows(_)) {
                        T::one() / T::of(r as f64)
                    } else {
                        T::one()
                    };
                    let da = self.adj_buf(adj, *a);
                    for row in da.chunks_mut(c) {
                        for j in 0..c {
                            row[j] += gd[j] * s;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let f = gd[0] * T::of(2.0) / T::of(av.len() as f64);
                self.acc_map(adj, *a, av, |i, _| f * (av[i] - bv[i]));
                self.acc_map(adj, *b, av, |i, _| -f * (av[i] - bv[i]));
            }
        }
    }

    fn adj_buf<'a>(&self, adj: &'a mut [Option<Array<T>>], id: NodeId) -> &'a mut [T] {
        adj[id.0]
            .get_or_insert_with(|| Array::zeros(&self.nodes[id.0].shape))
            .data_mut()
    }

    /// `adj[id][i] += f(i, g[i])` when `id` requires a gradient.
    fn acc_map(
        &self,
        adj: &mut [Option<Array<T>>],
        id: NodeId,
        g: &[T],
        f: impl Fn(usize, T) -> T,
    ) {
        if !self.rg(id) {
            return;
        }
        let buf = self.adj_buf(adj, id);
        for (i, (d, &x)) in buf.iter_mut().zip(g).enumerate() {
            *d += f(i, x);
        }
    }
}

fn zip<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn row_zip<T: Scalar>(a: &Array<T>, row: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let r = row.data();
    let c = r.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, r[i % c]))
        .collect();
    Array::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn rms<T: Scalar>(row: &[T], eps: T) -> T {
    let ms: T = row.iter().map(|&x| x * x).sum::<T>() / T::of(row.len() as f64);
    (ms + eps).sqrt()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    for x in row.iter_mut() {
        *x = *x - lse;
    }
}

/// Indices of the `k` largest values, ties broken toward the smaller index.
/// Returned in ascending index order.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k.min(values.len()));
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xin = g.input("x", &[x.len()]);
        let out = build(&mut g, xin);
        let arr = Array::vector(x.to_vec());
        let vals = g.forward(&ParamSet::new(), &[("x", &arr)]).unwrap();
        vals.get(out).to_f64_vec()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = eval1(|g, x| g.softmax(x).unwrap(), &[0.0, 0.0, 0.0]);
        for p in y {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let y = eval1(|g, x| g.log_sigmoid(x).unwrap(), &[0.0]);
        assert!((y[0] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = eval1(|g, x| g.relu(x).unwrap(), &[1.0, -2.0, 3.0]);
        assert_eq!(y, vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        let y = eval1(|g, x| g.log_sigmoid(x).unwrap(), &[-800.0, 800.0]);
        assert_eq!(y[0], -800.0);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn top_k_tie_goes_to_smaller_index() {
        assert_eq!(top_k_indices(&[2.0, 2.0, 1.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.1, 5.0, 0.0, 2.0], 2), vec![1, 3]);
        assert_eq!(top_k_indices(&[0.0, 0.0, 0.0], 2), vec![0, 1]);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[2, 3]);
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn bound_input_shape_is_validated() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[3]);
        let _ = g.relu(a).unwrap();
        let wrong = Array::vector(vec![1.0, 2.0]);
        assert!(matches!(
            g.forward(&ParamSet::new(), &[("a", &wrong)]),
            Err(Error::Shape { node: 0, .. })
        ));
        assert!(matches!(
            g.forward(&ParamSet::new(), &[]),
            Err(Error::MissingInput { node: 0, .. })
        ));
    }

    #[test]
    fn overflow_is_reported_with_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[1]);
        let s = g.scale(a, 1e300).unwrap();
        let _ = g.scale(s, 1e300).unwrap();
        let x = Array::vector(vec![10.0]);
        match g.forward(&ParamSet::new(), &[("a", &x)]) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "scale");
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let mut p = ParamSet::new();
        let x = p.add("x", Array::scalar(3.0));
        let mut g = Graph::new();
        let xn = g.param(&p, x);
        let y = g.square(xn).unwrap();
        let vals = g.forward(&p, &[]).unwrap();
        let grads = g.backward(&vals, y, &p).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn log_sigmoid_gradient_at_zero() {
        let mut p = ParamSet::new();
        let u = p.add("u", Array::scalar(0.0));
        let mut g = Graph::new();
        let un = g.param(&p, u);
        let y = g.log_sigmoid(un).unwrap();
        let vals = g.forward(&p, &[]).unwrap();
        let grads = g.backward(&vals, y, &p).unwrap();
        assert!((grads.get(u).item() - 0.5f64).abs() < 1e-15);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        // d/dx [x · sg(x)] at x = 2 is sg(x) = 2
        let mut p = ParamSet::new();
        let x = p.add("x", Array::scalar(2.0));
        let mut g = Graph::new();
        let xn = g.param(&p, x);
        let sg = g.stop_gradient(xn).unwrap();
        let y = g.mul(xn, sg).unwrap();
        let vals = g.forward(&p, &[]).unwrap();
        assert_eq!(vals.scalar(y), 4.0);
        let grads = g.backward(&vals, y, &p).unwrap();
        assert_eq!(grads.get(x).item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut p = ParamSet::new();
        let x = p.add("x", Array::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let xn = g.param(&p, x);
        let y = g.relu(xn).unwrap();
        let vals = g.forward(&p, &[]).unwrap();
        assert!(matches!(g.backward(&vals, y, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 2]);
        let s = g.causal_softmax(a).unwrap();
        let x = Array::matrix(2, 2, vec![5.0, 7.0, 0.0, 0.0]).unwrap();
        let v = g.forward(&ParamSet::new(), &[("a", &x)]).unwrap();
        assert_eq!(v.get(s).data(), &[1.0, 0.0, 0.5, 0.5]);
    }
}
