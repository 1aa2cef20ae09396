//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive pushes
//! its output value and enough bookkeeping to run the adjoint. Nodes whose
//! inputs never require gradients are skipped during backward, so frozen
//! backbone weights cost nothing beyond their forward values.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::similarity::{self, RowSimilarity};
use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};
use super::Tensor;
use crate::error::{MitpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Ln(NodeId, f64),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    VarAxis(NodeId, usize, usize),
    L2Normalize(NodeId, f64),
    Pick(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    AddN(Vec<NodeId>),
    RowSim {
        a: NodeId,
        b: NodeId,
        kind: RowSimilarity,
        bandwidths: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lanes of a 1-D or 2-D tensor along `axis`: (count, length, stride, start
/// offset of lane i).
fn lanes(shape: &[usize], axis: usize) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (shape, axis) {
        ([n], 0) => Some((1, *n, 1, vec![0])),
        ([r, c], 1) => Some((*r, *c, 1, (0..*r).map(|i| i * c).collect())),
        ([r, c], 0) => Some((*c, *r, *c, (0..*c).collect())),
        _ => None,
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(MitpError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id
    /// return the same node. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = if p.frozen {
            self.constant(p.tensor.clone())
        } else {
            self.variable(p.tensor.clone())
        };
        self.param_nodes.insert(id, node);
        node
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(MitpError::shape("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(MitpError::shape("matmul", sa, sb));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n, k2) = match (sa, sb) {
            ([m, k], [n, k2]) => (*m, *k, *n, *k2),
            _ => return Err(MitpError::shape("matmul_nt", sa, sb)),
        };
        if k != k2 {
            return Err(MitpError::shape("matmul_nt", sa, sb));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor::raw(vec![m, n], out), Op::MatMulNt(a, b), rg)
    }

    // ---- elementwise ------------------------------------------------------

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MitpError::shape(name, va.shape(), vb.shape()));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, Tensor::raw(shape, out), op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let (m, n) = match (sa, sr) {
            ([m, n], [k]) if n == k => (*m, *n),
            ([n], [k]) if n == k => (1, *n),
            _ => return Err(MitpError::shape("add_row", sa, sr)),
        };
        let va = self.value(a).data();
        let vr = self.value(row).data();
        let mut out = va.to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += vr[j];
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(&[a, row]);
        self.push("add_row", Tensor::raw(shape, out), Op::AddRow(a, row), rg)
    }

    /// Scales row i of an L×d matrix by entry i of an L-vector.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        let (m, n) = match (sa, sc) {
            ([m, n], [k]) if m == k => (*m, *n),
            _ => return Err(MitpError::shape("mul_col", sa, sc)),
        };
        let va = self.value(a).data();
        let vc = self.value(col).data();
        let mut out = va.to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= vc[i];
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(&[a, col]);
        self.push("mul_col", Tensor::raw(shape, out), Op::MulCol(a, col), rg)
    }

    fn unary(&mut self, name: &'static str, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(name, out, op, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the input clamped from below at `floor`.
    pub fn ln(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.unary("ln", a, move |x| x.max(floor).ln(), Op::Ln(a, floor))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (count, len, stride, starts) =
            lanes(v.shape(), axis).ok_or_else(|| MitpError::invalid("softmax", format!("axis {axis} of {:?}", v.shape())))?;
        if len == 0 || count == 0 {
            return Err(MitpError::EmptyAxis { op: "softmax" });
        }
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for start in starts {
            let idx = |k: usize| start + k * stride;
            let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push("softmax", Tensor::raw(shape, out), Op::Softmax(a, axis), rg)
    }

    /// Row-wise layer normalisation over the last axis with affine gain and
    /// bias vectors.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, n) = match v.shape() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            s => return Err(MitpError::invalid("layer_norm", format!("expected 1-D or 2-D, got {s:?}"))),
        };
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(MitpError::shape("layer_norm", v.shape(), self.shape(p)));
            }
        }
        let data = v.data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::raw(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    // ---- structure ----------------------------------------------------------

    /// Concatenates 2-D tensors along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| MitpError::invalid("concat_rows", "no inputs"))?;
        let cols = match self.shape(first) {
            [_, c] => *c,
            s => return Err(MitpError::invalid("concat_rows", format!("expected 2-D, got {s:?}"))),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => {
                    rows += r;
                    out.extend_from_slice(self.value(p).data());
                }
                s => return Err(MitpError::shape("concat_rows", self.shape(first), s)),
            }
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor::raw(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(MitpError::invalid("slice_rows", format!("expected 2-D, got {s:?}"))),
        };
        if start >= end || end > r {
            return Err(MitpError::invalid("slice_rows", format!("range {start}..{end} of {r} rows")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        self.push("slice_rows", Tensor::raw(vec![end - start, c], out), Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| MitpError::invalid("concat_cols", "no inputs"))?;
        let rows = match self.shape(first) {
            [r, _] => *r,
            s => return Err(MitpError::invalid("concat_cols", format!("expected 2-D, got {s:?}"))),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == rows => widths.push(*c),
                s => return Err(MitpError::shape("concat_cols", self.shape(first), s)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor::raw(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(MitpError::invalid("slice_cols", format!("expected 2-D, got {s:?}"))),
        };
        if start >= end || end > c {
            return Err(MitpError::invalid("slice_cols", format!("range {start}..{end} of {c} cols")));
        }
        let w = end - start;
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&data[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[a]);
        self.push("slice_cols", Tensor::raw(vec![r, w], out), Op::SliceCols(a, start), rg)
    }

    /// Sum of several same-shaped tensors.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| MitpError::invalid("add_n", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &p in parts {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(MitpError::shape("add_n", &shape, v.shape()));
            }
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += x;
            }
        }
        let rg = self.rg(parts);
        self.push("add_n", Tensor::raw(shape, out), Op::AddN(parts.to_vec()), rg)
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums along `axis`, dropping it.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (count, len, stride, starts) =
            lanes(v.shape(), axis).ok_or_else(|| MitpError::invalid("sum_axis", format!("axis {axis} of {:?}", v.shape())))?;
        let x = v.data();
        let out: Vec<f64> = starts
            .iter()
            .map(|&s| (0..len).map(|k| x[s + k * stride]).sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push("sum_axis", Tensor::raw(vec![count], out), Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let len = lanes(self.shape(a), axis).map_or(1, |l| l.1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Variance along `axis` with `ddof` delta degrees of freedom.
    pub fn var_axis(&mut self, a: NodeId, axis: usize, ddof: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (count, len, stride, starts) =
            lanes(v.shape(), axis).ok_or_else(|| MitpError::invalid("var_axis", format!("axis {axis} of {:?}", v.shape())))?;
        if len <= ddof {
            return Err(MitpError::EmptyAxis { op: "var_axis" });
        }
        let x = v.data();
        let out: Vec<f64> = starts
            .iter()
            .map(|&s| {
                let mean = (0..len).map(|k| x[s + k * stride]).sum::<f64>() / len as f64;
                (0..len).map(|k| (x[s + k * stride] - mean).powi(2)).sum::<f64>() / (len - ddof) as f64
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push("var_axis", Tensor::raw(vec![count], out), Op::VarAxis(a, axis, ddof), rg)
    }

    /// Scales the whole tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let norm = v.norm();
        if norm == 0.0 {
            return Err(MitpError::invalid("l2_normalize", "zero vector"));
        }
        let out = v.map(|x| x / norm);
        let rg = self.rg(&[a]);
        self.push("l2_normalize", out, Op::L2Normalize(a, norm), rg)
    }

    /// Single entry (flat index) as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(a);
        if index >= v.len() {
            return Err(MitpError::invalid("pick", format!("index {index} out of {}", v.len())));
        }
        let x = v.data()[index];
        let rg = self.rg(&[a]);
        self.push("pick", Tensor::scalar(x), Op::Pick(a, index), rg)
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        let (r, c) = match v.shape() {
            [r, c] => (*r, *c),
            s => return Err(MitpError::invalid("gather_rows", format!("expected 2-D, got {s:?}"))),
        };
        if indices.is_empty() {
            return Err(MitpError::EmptyAxis { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for (pos, &i) in indices.iter().enumerate() {
            if i >= r {
                return Err(MitpError::invalid(
                    "gather_rows",
                    format!("index {i} at position {pos} out of range for {r} rows"),
                ));
            }
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            Tensor::raw(vec![indices.len(), c], out),
            Op::GatherRows(table, indices.to_vec()),
            rg,
        )
    }

    /// Per-row similarity of two L×d matrices. For [`RowSimilarity::Mmd`]
    /// the RBF bandwidth of each row comes from `bandwidth`, or from the
    /// median heuristic when `None`; either way it is a constant of the
    /// graph.
    pub fn row_similarity(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: RowSimilarity,
        bandwidth: Option<f64>,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.ndim() != 2 {
            return Err(MitpError::shape("row_similarity", va.shape(), vb.shape()));
        }
        let (rows, d) = va.dims2();
        if d < kind.min_width() {
            return Err(MitpError::invalid(
                "row_similarity",
                format!("{} needs at least {} features, got {d}", kind.name(), kind.min_width()),
            ));
        }
        let mut bandwidths = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let (ra, rb) = (va.row(i), vb.row(i));
            let bw = match kind {
                RowSimilarity::Mmd => bandwidth.unwrap_or_else(|| similarity::median_bandwidth(ra, rb)),
                _ => 0.0,
            };
            bandwidths.push(bw);
            out.push(similarity::forward(kind, ra, rb, bw));
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "row_similarity",
            Tensor::vector(out),
            Op::RowSim {
                a,
                b,
                kind,
                bandwidths,
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(MitpError::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(MitpError::NotScalar(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves keep their gradients; intermediate buffers are freed.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.param_nodes
            .iter()
            .filter_map(|(&pid, &node)| self.grad(node).map(|g| (pid, g)))
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes.get(&id).copied()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().1;
                if self.requires_grad(*a) {
                    let da = matmul_nt_raw(gd, vb.data(), m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_raw(va.data(), gd, m, k, n);
                    self.acc(grads, *b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().0;
                if self.requires_grad(*a) {
                    let da = matmul_raw(gd, vb.data(), m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_raw(gd, va.data(), m, n, k);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd);
                self.acc(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let da: Vec<f64> = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gd);
                if self.requires_grad(*row) {
                    let n = self.value(*row).len();
                    let mut dr = vec![0.0; n];
                    for (i, g) in gd.iter().enumerate() {
                        dr[i % n] += g;
                    }
                    self.acc(grads, *row, &dr);
                }
            }
            Op::MulCol(a, col) => {
                let va = self.value(*a);
                let vc = self.value(*col).data();
                let (m, n) = va.dims2();
                if self.requires_grad(*a) {
                    let mut da = gd.to_vec();
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] *= vc[i];
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                if self.requires_grad(*col) {
                    let x = va.data();
                    let dc: Vec<f64> = (0..m)
                        .map(|i| (0..n).map(|j| gd[i * n + j] * x[i * n + j]).sum())
                        .collect();
                    self.acc(grads, *col, &dc);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.acc(grads, *a, &da);
            }
            Op::AddScalar(a) => self.acc(grads, *a, gd),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.acc(grads, *a, &da);
            }
            Op::Ln(a, floor) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Softmax(a, axis) => {
                let (_, len, stride, starts) = lanes(out.shape(), *axis).expect("validated in forward");
                let y = out.data();
                let mut da = vec![0.0; y.len()];
                for s in starts {
                    let dotp: f64 = (0..len).map(|k| gd[s + k * stride] * y[s + k * stride]).sum();
                    for k in 0..len {
                        let i = s + k * stride;
                        da[i] = y[i] * (gd[i] - dotp);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let rows = inv_std.len();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                            db[j] += gd[r * n + j];
                        }
                    }
                    self.acc(grads, *gamma, &dg);
                    self.acc(grads, *beta, &db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * n];
                    let nf = n as f64;
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..n).map(|j| gd[r * n + j] * gam[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = (0..n).map(|j| dxhat[j] * xhat[r * n + j]).sum();
                        for j in 0..n {
                            dx[r * n + j] =
                                inv_std[r] / nf * (nf * dxhat[j] - sum_d - xhat[r * n + j] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, &gd[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                if self.requires_grad(*a) {
                    let va = self.value(*a);
                    let c = va.dims2().1;
                    let mut da = vec![0.0; va.len()];
                    da[start * c..start * c + gd.len()].copy_from_slice(gd);
                    self.acc(grads, *a, &da);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires_grad(*a) {
                    let va = self.value(*a);
                    let (r, c) = va.dims2();
                    let w = out.dims2().1;
                    let mut da = vec![0.0; va.len()];
                    for i in 0..r {
                        da[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    self.acc(grads, *a, &da);
                }
            }
            Op::Sum(a) => {
                let da = vec![gd[0]; self.value(*a).len()];
                self.acc(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![gd[0] / n as f64; n];
                self.acc(grads, *a, &da);
            }
            Op::SumAxis(a, axis) => {
                let va = self.value(*a);
                let (_, len, stride, starts) = lanes(va.shape(), *axis).expect("validated in forward");
                let mut da = vec![0.0; va.len()];
                for (lane, s) in starts.into_iter().enumerate() {
                    for k in 0..len {
                        da[s + k * stride] = gd[lane];
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::VarAxis(a, axis, ddof) => {
                let va = self.value(*a);
                let (_, len, stride, starts) = lanes(va.shape(), *axis).expect("validated in forward");
                let x = va.data();
                let mut da = vec![0.0; va.len()];
                for (lane, s) in starts.into_iter().enumerate() {
                    let mean = (0..len).map(|k| x[s + k * stride]).sum::<f64>() / len as f64;
                    for k in 0..len {
                        let i = s + k * stride;
                        da[i] = gd[lane] * 2.0 * (x[i] - mean) / (len - ddof) as f64;
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::L2Normalize(a, norm) => {
                let y = out.data();
                let ydotg: f64 = y.iter().zip(gd).map(|(y, g)| y * g).sum();
                let da: Vec<f64> = y.iter().zip(gd).map(|(y, g)| (g - y * ydotg) / norm).collect();
                self.acc(grads, *a, &da);
            }
            Op::Pick(a, index) => {
                let mut da = vec![0.0; self.value(*a).len()];
                da[*index] = gd[0];
                self.acc(grads, *a, &da);
            }
            Op::GatherRows(table, indices) => {
                let vt = self.value(*table);
                let c = vt.dims2().1;
                let mut dt = vec![0.0; vt.len()];
                for (pos, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] += gd[pos * c + j];
                    }
                }
                self.acc(grads, *table, &dt);
            }
            Op::AddN(parts) => {
                for &p in parts {
                    self.acc(grads, p, gd);
                }
            }
            Op::RowSim {
                a,
                b,
                kind,
                bandwidths,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.dims2().1;
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for (i, &bw) in bandwidths.iter().enumerate() {
                    similarity::backward(
                        *kind,
                        va.row(i),
                        vb.row(i),
                        bw,
                        gd[i],
                        &mut da[i * d..(i + 1) * d],
                        &mut db[i * d..(i + 1) * d],
                    );
                }
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign_slice(delta),
            slot @ None => {
                *slot = Some(Tensor::raw(self.shape(id).to_vec(), delta.to_vec()));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_node(g: &mut Graph, v: &[f64]) -> NodeId {
        g.variable(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[-1.5, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = vec_node(&mut g, &[-1.0, 2.0]);
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[3.0, -1.0, 0.5]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(MitpError::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(MitpError::GraphConsumed)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn constants_never_accumulate() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = vec_node(&mut g, &[3.0, 4.0]);
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(g.exp(x), Err(MitpError::NonFinite { op: "exp" })));
    }

    #[test]
    fn softmax_of_empty_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.softmax(x, 0), Err(MitpError::EmptyAxis { .. })));
        let y = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.softmax(y, 2).is_err());
    }
}
