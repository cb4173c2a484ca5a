//! Dense-matrix reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value, so node inputs always precede the node itself. [`Graph::backward`]
//! sweeps the tape in reverse and returns an adjoint for every node. Graphs
//! are cheap to build and are rebuilt for each training step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside [`Graph::log`] so vanishing probabilities never
/// produce `-inf`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant
    /// for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1×1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Picks the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// Index of the largest entry of each row (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Reduction target for [`Graph::sum`] and [`Graph::mean`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Everything collapses to a 1×1 result.
    All,
    /// Each row collapses to one value: `n×m -> n×1`.
    Rows,
    /// Each column collapses to one value: `n×m -> 1×m`.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Log(NodeId),
    Tanh(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    Transpose(NodeId),
    Sum(NodeId, Axis),
    Mean(NodeId, Axis),
    NegSqDist(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::NegSqDist(..) => "neg_sq_dist",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Tape of matrix operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], one per node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.adjoints[id.0]
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

fn row_softmax_values(a: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.data.len());
    for i in 0..a.rows {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / total));
    }
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

fn row_log_softmax_values(a: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.data.len());
    for i in 0..a.rows {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|&v| v - lse));
    }
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

fn reduce_sum(a: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::All => Matrix::scalar(a.data.iter().sum()),
        Axis::Rows => Matrix::from_fn(a.rows, 1, |i, _| a.row(i).iter().sum()),
        Axis::Cols => {
            let mut out = vec![0.0; a.cols];
            for i in 0..a.rows {
                for (o, &v) in out.iter_mut().zip(a.row(i)) {
                    *o += v;
                }
            }
            Matrix {
                rows: 1,
                cols: a.cols,
                data: out,
            }
        }
    }
}

fn reduce_count(shape: (usize, usize), axis: Axis) -> usize {
    match axis {
        Axis::All => shape.0 * shape.1,
        Axis::Rows => shape.1,
        Axis::Cols => shape.0,
    }
}

/// Spreads a reduced adjoint back over the input shape.
fn broadcast_reduced(g: &Matrix, shape: (usize, usize), axis: Axis, factor: f64) -> Matrix {
    match axis {
        Axis::All => Matrix::filled(shape.0, shape.1, g.data[0] * factor),
        Axis::Rows => Matrix::from_fn(shape.0, shape.1, |i, _| g.data[i] * factor),
        Axis::Cols => Matrix::from_fn(shape.0, shape.1, |_, j| g.data[j] * factor),
    }
}

fn neg_sq_dist_values(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows, b.rows, |i, j| {
        -a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    })
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.value(id).as_scalar()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "{} produced a non-finite value",
            op.name()
        );
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Input whose adjoint is never needed.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Adds the `1×m` row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let r = self.value(row).data.clone();
        let av = self.value(a);
        let value = Matrix::from_fn(sa.0, sa.1, |i, j| av.get(i, j) + r[j]);
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    /// `ln(max(x, LOG_FLOOR))`, element-wise.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(Op::Log(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Softmax of each row, stabilised by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data.is_empty() {
            return Err(Error::contract("row_softmax of an empty matrix"));
        }
        let value = row_softmax_values(self.value(a));
        Ok(self.push(Op::RowSoftmax(a), value))
    }

    /// Log of the row softmax, computed through log-sum-exp.
    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data.is_empty() {
            return Err(Error::contract("row_log_softmax of an empty matrix"));
        }
        let value = row_log_softmax_values(self.value(a));
        Ok(self.push(Op::RowLogSoftmax(a), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let value = reduce_sum(self.value(a), axis);
        self.push(Op::Sum(a, axis), value)
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let shape = self.shape(a);
        let count = reduce_count(shape, axis);
        if count == 0 {
            return Err(Error::contract(format!(
                "mean over an empty axis of a {}x{} matrix",
                shape.0, shape.1
            )));
        }
        let value = reduce_sum(self.value(a), axis).map(|v| v / count as f64);
        Ok(self.push(Op::Mean(a, axis), value))
    }

    /// Pairwise negative squared Euclidean distance between the rows of `a`
    /// (`n×d`) and the rows of `b` (`m×d`), giving an `n×m` matrix.
    pub fn neg_sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::Dimension {
                op: "neg_sq_dist",
                left: sa,
                right: sb,
            });
        }
        let value = neg_sq_dist_values(self.value(a), self.value(b));
        Ok(self.push(Op::NegSqDist(a, b), value))
    }

    /// Reverse sweep from a scalar `root`. Adjoints of nodes the root does
    /// not depend on are zero.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a 1x1 root, got {}x{}",
                root_shape.0, root_shape.1
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(b).transpose())?;
                    let gb = self.value(a).transpose().matmul(&g)?;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g.clone());
                    accumulate(&mut adj, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, a, g.clone());
                    accumulate(&mut adj, b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut adj, a, g.zip_map(self.value(b), |u, v| u * v));
                    accumulate(&mut adj, b, g.zip_map(self.value(a), |u, v| u * v));
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, row, reduce_sum(&g, Axis::Cols));
                    accumulate(&mut adj, a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut adj, a, g.map(|v| v * s)),
                Op::Log(a) => {
                    let x = self.value(a);
                    let ga = g.zip_map(x, |u, v| if v > LOG_FLOOR { u / v } else { 0.0 });
                    accumulate(&mut adj, a, ga);
                }
                Op::Tanh(a) => accumulate(&mut adj, a, g.zip_map(y, |u, t| u * (1.0 - t * t))),
                Op::RowSoftmax(a) => {
                    let dots: Vec<f64> = (0..y.rows)
                        .map(|i| g.row(i).iter().zip(y.row(i)).map(|(u, p)| u * p).sum())
                        .collect();
                    let ga = Matrix::from_fn(y.rows, y.cols, |i, j| {
                        y.get(i, j) * (g.get(i, j) - dots[i])
                    });
                    accumulate(&mut adj, a, ga);
                }
                Op::RowLogSoftmax(a) => {
                    let totals: Vec<f64> = (0..y.rows).map(|i| g.row(i).iter().sum()).collect();
                    let ga = Matrix::from_fn(y.rows, y.cols, |i, j| {
                        g.get(i, j) - y.get(i, j).exp() * totals[i]
                    });
                    accumulate(&mut adj, a, ga);
                }
                Op::Transpose(a) => accumulate(&mut adj, a, g.transpose()),
                Op::Sum(a, axis) => {
                    let ga = broadcast_reduced(&g, self.shape(a), axis, 1.0);
                    accumulate(&mut adj, a, ga);
                }
                Op::Mean(a, axis) => {
                    let shape = self.shape(a);
                    let factor = 1.0 / reduce_count(shape, axis) as f64;
                    accumulate(&mut adj, a, broadcast_reduced(&g, shape, axis, factor));
                }
                Op::NegSqDist(a, b) => {
                    let (xa, xb) = (self.value(a), self.value(b));
                    // d/dx_i = -2 (rowsum(G)_i x_i - (G y)_i)
                    // d/dy_j =  2 ((G^T x)_j - colsum(G)_j y_j)
                    let gy = g.matmul(xb)?;
                    let gtx = g.transpose().matmul(xa)?;
                    let row_tot = reduce_sum(&g, Axis::Rows);
                    let col_tot = reduce_sum(&g, Axis::Cols);
                    let ga = Matrix::from_fn(xa.rows, xa.cols, |i, d| {
                        -2.0 * (row_tot.data[i] * xa.get(i, d) - gy.get(i, d))
                    });
                    let gb = Matrix::from_fn(xb.rows, xb.cols, |j, d| {
                        2.0 * (gtx.get(j, d) - col_tot.data[j] * xb.get(j, d))
                    });
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
            }
            adj[idx] = Some(g);
        }

        let adjoints = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                adj.get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(n.value.rows, n.value.cols))
            })
            .collect();
        Ok(Gradients { adjoints })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(g.data) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over entries of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of a scalar function of one matrix
/// against central differences.
pub fn grad_check<F>(f: F, x: &Matrix, step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), step, tol)
}

/// Multi-input variant of [`grad_check`].
pub fn grad_check_many<F>(f: F, xs: &[Matrix], step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with(f, xs, step, tol, |_| {})
}

/// [`grad_check_many`] with a hook that may tamper with the analytic
/// gradients before comparison. Used to confirm the checker catches faults.
pub fn grad_check_with<F, H>(f: F, xs: &[Matrix], step: f64, tol: f64, hook: H) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    H: Fn(&mut Vec<Matrix>),
{
    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let root = f(&mut g, &ids)?;
        g.scalar(root)
            .ok_or_else(|| Error::contract("grad_check function must return a 1x1 node"))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs.iter().map(|m| g.leaf(m.clone())).collect();
    let root = f(&mut g, &ids)?;
    let grads = g.backward(root)?;
    let mut analytic: Vec<Matrix> = ids.iter().map(|&id| grads.get(id).clone()).collect();
    hook(&mut analytic);

    let mut worst = None;
    let mut max_err: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for e in 0..x.data.len() {
            let orig = x.data[e];
            inputs[k].data[e] = orig + step;
            let up = eval(&inputs)?;
            inputs[k].data[e] = orig - step;
            let down = eval(&inputs)?;
            inputs[k].data[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[k].data[e] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((k, e));
            }
        }
    }
    Ok(GradCheck {
        max_rel_error: max_err,
        worst,
        passed: max_err < tol,
    })
}
