use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::kernels;

/// Handle to a node of a [`Graph`], carrying the node's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    index: usize,
    rows: usize,
    cols: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
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

    /// Number of scalar entries.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// The public primitive set. Every primitive has a vector-Jacobian rule
/// written in terms of graph operations, so backward passes are themselves
/// differentiable.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    MulElementwise,
    ScalarMul(f64),
    MatMul,
    ConcatRows,
    Relu,
    Tanh,
    Square,
    Exp,
    Log,
    Sum,
    Mean,
    /// Inputs: logits (R x C) and non-negative label weights (R x C, one-hot
    /// for ordinary classification). Output: per-row losses (R x 1).
    SoftmaxCrossEntropy,
}

/// Recorded operation of a node. Superset of [`Primitive`]: the extra
/// operations appear in backward passes and in model plumbing.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    ConcatRows,
    ConcatCols,
    Slice { row: usize, col: usize },
    Embed { row: usize, col: usize },
    GatherRows(Arc<[usize]>),
    ScatterRows(Arc<[usize]>),
    Broadcast,
    RowSum,
    ColBroadcast,
    Relu,
    /// `StepMul(x, g) = g * [x > 0]`; constant in `x`.
    StepMul,
    Tanh,
    Square,
    Exp,
    Log,
    Recip,
    Sum,
    Mean,
    Softmax,
    LogSoftmax,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
}

/// An append-only, eagerly evaluated computation graph of dense `f64`
/// matrices (rank ≤ 2, row-major).
///
/// Parents always precede their children. A graph is meant to be built for
/// one episode and dropped afterwards.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    /// While set, every new node is recorded as a parentless leaf.
    pub(crate) detached: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a differentiable leaf holding `values` in a `rows x cols` shape.
    pub fn variable(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<NodeRef> {
        if values.len() != rows * cols {
            return Err(AutodiffError::BadBlock {
                len: values.len(),
                rows,
                cols,
            });
        }
        Ok(self.push_leaf(values, rows, cols))
    }

    /// Same as [`Graph::variable`]; leaves are only distinguished by what
    /// the caller asks gradients for.
    pub fn constant(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<NodeRef> {
        self.variable(values, rows, cols)
    }

    pub fn scalar(&mut self, value: f64) -> NodeRef {
        self.push_leaf(vec![value], 1, 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeRef {
        self.push_leaf(vec![0.0; rows * cols], rows, cols)
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> NodeRef {
        self.push_leaf(vec![1.0; rows * cols], rows, cols)
    }

    /// Copies the value of `node` into a new leaf with no history.
    pub fn detach(&mut self, node: NodeRef) -> Result<NodeRef> {
        self.check(node)?;
        let value = self.nodes[node.index].value.clone();
        Ok(self.push_leaf(value, node.rows, node.cols))
    }

    pub fn value(&self, node: NodeRef) -> &[f64] {
        &self.nodes[node.index].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, node: NodeRef) -> f64 {
        debug_assert!(node.is_scalar());
        self.nodes[node.index].value[0]
    }

    /// Runs `f` with recording disabled: every node created inside is a
    /// parentless constant.
    pub fn detached<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.detached;
        self.detached = true;
        let out = f(self);
        self.detached = prev;
        out
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub(crate) fn check(&self, node: NodeRef) -> Result<()> {
        match self.nodes.get(node.index) {
            Some(n) if n.rows == node.rows && n.cols == node.cols => Ok(()),
            _ => Err(AutodiffError::UnknownNode {
                index: node.index,
                len: self.nodes.len(),
            }),
        }
    }

    fn push_leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> NodeRef {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            rows,
            cols,
        });
        NodeRef { index, rows, cols }
    }

    fn push(&mut self, op: Op, parents: &[NodeRef], value: Vec<f64>, rows: usize, cols: usize) -> NodeRef {
        debug_assert_eq!(value.len(), rows * cols);
        if self.detached {
            return self.push_leaf(value, rows, cols);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.index).collect(),
            value,
            rows,
            cols,
        });
        NodeRef { index, rows, cols }
    }

    /// Applies one of the public primitives.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeRef]) -> Result<NodeRef> {
        let unary = |name: &'static str| -> Result<NodeRef> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(AutodiffError::Arity {
                    op: name,
                    expected: 1,
                    got: inputs.len(),
                }),
            }
        };
        let binary = |name: &'static str| -> Result<(NodeRef, NodeRef)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(AutodiffError::Arity {
                    op: name,
                    expected: 2,
                    got: inputs.len(),
                }),
            }
        };
        match op {
            Primitive::Add => {
                let (a, b) = binary("add")?;
                self.add(a, b)
            }
            Primitive::Sub => {
                let (a, b) = binary("sub")?;
                self.sub(a, b)
            }
            Primitive::MulElementwise => {
                let (a, b) = binary("mul")?;
                self.mul(a, b)
            }
            Primitive::ScalarMul(c) => self.scale(unary("scalar_mul")?, c),
            Primitive::MatMul => {
                let (a, b) = binary("matmul")?;
                self.matmul(a, b)
            }
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::Relu => self.relu(unary("relu")?),
            Primitive::Tanh => self.tanh(unary("tanh")?),
            Primitive::Square => self.square(unary("square")?),
            Primitive::Exp => self.exp(unary("exp")?),
            Primitive::Log => self.log(unary("log")?),
            Primitive::Sum => self.sum(unary("sum")?),
            Primitive::Mean => self.mean(unary("mean")?),
            Primitive::SoftmaxCrossEntropy => {
                let (a, b) = binary("softmax_cross_entropy")?;
                self.softmax_cross_entropy(a, b)
            }
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        op: Op,
        a: NodeRef,
        b: NodeRef,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.nodes[a.index].value;
        let bv = &self.nodes[b.index].value;
        let (value, shape) = if a.shape() == b.shape() {
            (av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(), a.shape())
        } else if a.is_scalar() {
            let s = av[0];
            (bv.iter().map(|&y| f(s, y)).collect(), b.shape())
        } else if b.is_scalar() {
            let s = bv[0];
            (av.iter().map(|&x| f(x, s)).collect(), a.shape())
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        };
        Ok(self.push(op, &[a, b], value, shape.0, shape.1))
    }

    fn map(&mut self, op: Op, a: NodeRef, f: impl Fn(f64) -> f64) -> Result<NodeRef> {
        self.check(a)?;
        let value = self.nodes[a.index].value.iter().map(|&x| f(x)).collect();
        Ok(self.push(op, &[a], value, a.rows, a.cols))
    }

    /// Elementwise sum; a 1x1 operand broadcasts against the other.
    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.elementwise("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.elementwise("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.elementwise("mul", Op::Mul, a, b, |x, y| x * y)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        self.map(Op::Scale(c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = kernels::matmul(
            &self.nodes[a.index].value,
            &self.nodes[b.index].value,
            a.rows,
            a.cols,
            b.cols,
        );
        Ok(self.push(Op::MatMul, &[a, b], value, a.rows, b.cols))
    }

    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let value = kernels::transpose(&self.nodes[a.index].value, a.rows, a.cols);
        Ok(self.push(Op::Transpose, &[a], value, a.cols, a.rows))
    }

    /// Stacks blocks vertically; column counts must agree.
    pub fn concat_rows(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        let first = *parts.first().ok_or(AutodiffError::Arity {
            op: "concat_rows",
            expected: 1,
            got: 0,
        })?;
        let mut rows = 0;
        for p in parts {
            self.check(*p)?;
            if p.cols != first.cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
        }
        let mut value = Vec::with_capacity(rows * first.cols);
        for p in parts {
            value.extend_from_slice(&self.nodes[p.index].value);
        }
        Ok(self.push(Op::ConcatRows, parts, value, rows, first.cols))
    }

    /// Joins blocks side by side; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        let first = *parts.first().ok_or(AutodiffError::Arity {
            op: "concat_cols",
            expected: 1,
            got: 0,
        })?;
        let mut cols = 0;
        for p in parts {
            self.check(*p)?;
            if p.rows != first.rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            cols += p.cols;
        }
        let rows = first.rows;
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.index].value;
                value.extend_from_slice(&v[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Ok(self.push(Op::ConcatCols, parts, value, rows, cols))
    }

    /// The `rows x cols` sub-block starting at (`row`, `col`).
    pub fn slice(&mut self, a: NodeRef, row: usize, col: usize, rows: usize, cols: usize) -> Result<NodeRef> {
        self.check(a)?;
        if row + rows > a.rows || col + cols > a.cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                lhs: a.shape(),
                rhs: (row + rows, col + cols),
            });
        }
        let src = &self.nodes[a.index].value;
        let mut value = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            value.extend_from_slice(&src[r * a.cols + col..r * a.cols + col + cols]);
        }
        Ok(self.push(Op::Slice { row, col }, &[a], value, rows, cols))
    }

    /// Places `a` at (`row`, `col`) inside a `rows x cols` block of zeros.
    pub fn embed(&mut self, a: NodeRef, row: usize, col: usize, rows: usize, cols: usize) -> Result<NodeRef> {
        self.check(a)?;
        if row + a.rows > rows || col + a.cols > cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "embed",
                lhs: a.shape(),
                rhs: (rows, cols),
            });
        }
        let src = &self.nodes[a.index].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..a.rows {
            let dst = (row + r) * cols + col;
            value[dst..dst + a.cols].copy_from_slice(&src[r * a.cols..(r + 1) * a.cols]);
        }
        Ok(self.push(Op::Embed { row, col }, &[a], value, rows, cols))
    }

    /// Output row `i` is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: NodeRef, indices: &[usize]) -> Result<NodeRef> {
        self.check(a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows) {
            return Err(AutodiffError::Domain {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {} rows", a.rows),
            });
        }
        let value = kernels::gather_rows(&self.nodes[a.index].value, a.cols, indices);
        let idx: Arc<[usize]> = indices.into();
        Ok(self.push(Op::GatherRows(idx), &[a], value, indices.len(), a.cols))
    }

    /// Adjoint of [`Graph::gather_rows`]: row `i` of `a` is added into row
    /// `indices[i]` of a zero block with `rows` rows.
    pub fn scatter_rows(&mut self, a: NodeRef, indices: &[usize], rows: usize) -> Result<NodeRef> {
        self.check(a)?;
        if indices.len() != a.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_rows",
                lhs: a.shape(),
                rhs: (indices.len(), a.cols),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Domain {
                op: "scatter_rows",
                detail: format!("row index {bad} out of range for {rows} rows"),
            });
        }
        let value = kernels::scatter_rows(&self.nodes[a.index].value, a.cols, indices, rows);
        let idx: Arc<[usize]> = indices.into();
        Ok(self.push(Op::ScatterRows(idx), &[a], value, rows, a.cols))
    }

    /// Repeats a 1x1 node over a `rows x cols` block.
    pub fn broadcast(&mut self, a: NodeRef, rows: usize, cols: usize) -> Result<NodeRef> {
        self.check(a)?;
        if !a.is_scalar() {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                lhs: a.shape(),
                rhs: (rows, cols),
            });
        }
        let value = vec![self.nodes[a.index].value[0]; rows * cols];
        Ok(self.push(Op::Broadcast, &[a], value, rows, cols))
    }

    /// Sums each row, giving an `R x 1` column.
    pub fn row_sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let src = &self.nodes[a.index].value;
        let value = (0..a.rows)
            .map(|r| src[r * a.cols..(r + 1) * a.cols].iter().sum())
            .collect();
        Ok(self.push(Op::RowSum, &[a], value, a.rows, 1))
    }

    /// Repeats an `R x 1` column across `cols` columns.
    pub fn col_broadcast(&mut self, a: NodeRef, cols: usize) -> Result<NodeRef> {
        self.check(a)?;
        if a.cols != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "col_broadcast",
                lhs: a.shape(),
                rhs: (a.rows, cols),
            });
        }
        let src = &self.nodes[a.index].value;
        let mut value = Vec::with_capacity(a.rows * cols);
        for &v in src {
            value.extend(std::iter::repeat_n(v, cols));
        }
        Ok(self.push(Op::ColBroadcast, &[a], value, a.rows, cols))
    }

    pub fn relu(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.map(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `g * [x > 0]`, the ReLU derivative applied to `g`.
    pub fn step_mul(&mut self, x: NodeRef, g: NodeRef) -> Result<NodeRef> {
        self.check(x)?;
        self.check(g)?;
        if x.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "step_mul",
                lhs: x.shape(),
                rhs: g.shape(),
            });
        }
        let xv = &self.nodes[x.index].value;
        let gv = &self.nodes[g.index].value;
        let value = xv
            .iter()
            .zip(gv)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(self.push(Op::StepMul, &[x, g], value, x.rows, x.cols))
    }

    pub fn tanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.map(Op::Tanh, a, f64::tanh)
    }

    pub fn square(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.map(Op::Square, a, |x| x * x)
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.map(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        if let Some(bad) = self.nodes[a.index].value.iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.map(Op::Log, a, f64::ln)
    }

    pub fn recip(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        if self.nodes[a.index].value.contains(&0.0) {
            return Err(AutodiffError::Domain {
                op: "recip",
                detail: "division by zero".into(),
            });
        }
        self.map(Op::Recip, a, |x| 1.0 / x)
    }

    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let s = self.nodes[a.index].value.iter().sum();
        Ok(self.push(Op::Sum, &[a], vec![s], 1, 1))
    }

    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        if a.is_empty() {
            return Err(AutodiffError::Domain {
                op: "mean",
                detail: "mean of an empty block".into(),
            });
        }
        let v = &self.nodes[a.index].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Op::Mean, &[a], vec![m], 1, 1))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        check_finite("softmax", &self.nodes[a.index].value)?;
        let value = kernels::softmax_rows(&self.nodes[a.index].value, a.rows, a.cols);
        Ok(self.push(Op::Softmax, &[a], value, a.rows, a.cols))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        check_finite("log_softmax", &self.nodes[a.index].value)?;
        let value = kernels::log_softmax_rows(&self.nodes[a.index].value, a.rows, a.cols);
        Ok(self.push(Op::LogSoftmax, &[a], value, a.rows, a.cols))
    }

    /// Per-row cross-entropy `sum_c labels[r,c] * (logsumexp(z_r) - z[r,c])`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeRef, labels: NodeRef) -> Result<NodeRef> {
        self.check(logits)?;
        self.check(labels)?;
        if logits.shape() != labels.shape() || logits.cols == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: logits.shape(),
                rhs: labels.shape(),
            });
        }
        let z = &self.nodes[logits.index].value;
        let y = &self.nodes[labels.index].value;
        check_finite("softmax_cross_entropy", z)?;
        if let Some(bad) = y.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(AutodiffError::Domain {
                op: "softmax_cross_entropy",
                detail: format!("label weight {bad} is not a finite non-negative number"),
            });
        }
        let logp = kernels::log_softmax_rows(z, logits.rows, logits.cols);
        let c = logits.cols;
        let value = (0..logits.rows)
            .map(|r| {
                -(0..c)
                    .map(|j| y[r * c + j] * logp[r * c + j])
                    .sum::<f64>()
            })
            .collect();
        Ok(self.push(Op::SoftmaxCrossEntropy, &[logits, labels], value, logits.rows, 1))
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !x.is_finite()) {
        Some(bad) => Err(AutodiffError::Domain {
            op,
            detail: format!("non-finite input {bad}"),
        }),
        None => Ok(()),
    }
}

impl Graph {
    pub(crate) fn node_ref(&self, index: usize) -> NodeRef {
        let n = &self.nodes[index];
        NodeRef {
            index,
            rows: n.rows,
            cols: n.cols,
        }
    }
}
