//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns a flat arena of nodes; every operation evaluates
//! eagerly, records its inputs, and returns a [`Var`] handle. Calling
//! [`Graph::backward`] on a scalar loss walks the arena once in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! leaf. Graphs are cheap and disposable: build one per training example,
//! harvest leaf gradients, drop it.
//!
//! All shape-sensitive constructors return [`TensorError`] naming the
//! offending operation; elementwise unary ops cannot fail.

use std::cell::RefCell;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    MatVec(usize, usize),
    ConcatVec(Vec<usize>),
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    Row(usize, usize),
    SliceVec(usize, usize, usize),
    Cols(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    RepeatRow(usize, usize),
    Reshape(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxVec(usize),
    SoftmaxRows(usize, Option<Vec<bool>>),
    LayerNormVec(usize, f64),
    LayerNormRows(usize, f64),
    Sum(usize),
    Mean(usize),
    Norm2(usize),
    CrossEntropy(usize, usize),
    BadSquare(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// Arena of eagerly evaluated nodes supporting one reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Differentiable input (parameter or anything whose gradient is wanted).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input; backward never allocates a gradient for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Current value (cloned).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Shape without cloning the data.
    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Accumulated gradient after [`Self::backward`]; `None` when the node
    /// does not influence the loss or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, op: Op, value: Tensor, inputs: &[usize]) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push(op, value, needs)
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.shape() != tb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor {
                data,
                shape: ta.shape().to_vec(),
            }
        };
        Ok(self.push_op(op, value, &[a.id, b.id]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.with(a, |t| Tensor {
            data: t.data().iter().map(|&x| -x).collect(),
            shape: t.shape().to_vec(),
        });
        self.push_op(Op::Neg(a.id), value, &[a.id])
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = self.with(a, |t| Tensor {
            data: t.data().iter().map(|&x| k * x).collect(),
            shape: t.shape().to_vec(),
        });
        self.push_op(Op::Scale(a.id, k), value, &[a.id])
    }

    /// Adds row vector `b[n]` to every row of `a[m,n]`.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.shape().len() != 2 || tb.shape().len() != 1 || ta.cols() != tb.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let (m, n) = (ta.rows(), ta.cols());
            let mut data = ta.data().to_vec();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += tb.data()[j];
                }
            }
            Tensor::matrix(m, n, data)
        };
        Ok(self.push_op(Op::AddRow(a.id, b.id), value, &[a.id, b.id]))
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = vec![0.0; m * n];
            mm_nn(ta.data(), tb.data(), m, k, n, &mut out);
            Tensor::matrix(m, n, out)
        };
        Ok(self.push_op(Op::MatMul(a.id, b.id), value, &[a.id, b.id]))
    }

    /// `a[m,k] * b[n,k]^T`; the common "rows of a against rows of b" product.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_nt",
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            let mut out = vec![0.0; m * n];
            mm_nt(ta.data(), tb.data(), m, k, n, &mut out);
            Tensor::matrix(m, n, out)
        };
        Ok(self.push_op(Op::MatMulNT(a.id, b.id), value, &[a.id, b.id]))
    }

    /// `w[m,n] * x[n] -> [m]`.
    pub fn matvec(&self, w: Var, x: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tw, tx) = (&nodes[w.id].value, &nodes[x.id].value);
            if tw.shape().len() != 2 || tx.shape().len() != 1 || tw.cols() != tx.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "matvec",
                    detail: format!("{:?} vs {:?}", tw.shape(), tx.shape()),
                });
            }
            let (m, n) = (tw.rows(), tw.cols());
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &tw.data()[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * tx.data()[j];
                }
                out[i] = acc;
            }
            Tensor::vector(out)
        };
        Ok(self.push_op(Op::MatVec(w.id, x.id), value, &[w.id, x.id]))
    }

    /// Concatenates rank-1 tensors end to end.
    pub fn concat_vec(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_vec" });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.id].value;
                if t.shape().len() != 1 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_vec",
                        detail: format!("expected rank 1, got {:?}", t.shape()),
                    });
                }
                data.extend_from_slice(t.data());
            }
            Tensor::vector(data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push_op(Op::ConcatVec(ids.clone()), value, &ids))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let m = nodes[parts[0].id].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.id].value;
                if t.shape().len() != 2 || t.rows() != m {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        detail: format!("expected {m} rows, got {:?}", t.shape()),
                    });
                }
                widths.push(t.cols());
            }
            let n: usize = widths.iter().sum();
            let mut data = vec![0.0; m * n];
            let mut off = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                let w = t.cols();
                for i in 0..m {
                    data[i * n + off..i * n + off + w].copy_from_slice(t.row(i));
                }
                off += w;
            }
            Tensor::matrix(m, n, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push_op(Op::ConcatCols(ids.clone()), value, &ids))
    }

    /// Stacks equal-length rank-1 tensors as matrix rows.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].id].value.len();
            let mut data = Vec::with_capacity(parts.len() * n);
            for p in parts {
                let t = &nodes[p.id].value;
                if t.shape().len() != 1 || t.len() != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack_rows",
                        detail: format!("expected [{n}], got {:?}", t.shape()),
                    });
                }
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(parts.len(), n, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push_op(Op::StackRows(ids.clone()), value, &ids))
    }

    /// Row `i` of a matrix as a rank-1 tensor.
    pub fn row(&self, x: Var, i: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 2 || i >= t.rows() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "row",
                    index: i,
                    shape: t.shape().to_vec(),
                });
            }
            Tensor::vector(t.row(i).to_vec())
        };
        Ok(self.push_op(Op::Row(x.id, i), value, &[x.id]))
    }

    /// Contiguous slice `[start, start+len)` of a rank-1 tensor.
    pub fn slice_vec(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 1 || start + len > t.len() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice_vec",
                    index: start + len,
                    shape: t.shape().to_vec(),
                });
            }
            Tensor::vector(t.data()[start..start + len].to_vec())
        };
        Ok(self.push_op(Op::SliceVec(x.id, start, len), value, &[x.id]))
    }

    /// Column block `[start, start+len)` of a matrix.
    pub fn cols(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 2 || start + len > t.cols() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cols",
                    index: start + len,
                    shape: t.shape().to_vec(),
                });
            }
            let (m, n) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
            }
            Tensor::matrix(m, len, data)
        };
        Ok(self.push_op(Op::Cols(x.id, start, len), value, &[x.id]))
    }

    /// Selects rows (repeats allowed) into a new matrix; gradients
    /// accumulate back into the source rows.
    pub fn gather_rows(&self, x: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("expected rank 2, got {:?}", t.shape()),
                });
            }
            let n = t.cols();
            let mut data = Vec::with_capacity(ids.len() * n);
            for &i in ids {
                if i >= t.rows() {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        shape: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(ids.len(), n, data)
        };
        Ok(self.push_op(Op::GatherRows(x.id, ids.to_vec()), value, &[x.id]))
    }

    /// Tiles a rank-1 tensor as `m` identical matrix rows.
    pub fn repeat_row(&self, x: Var, m: usize) -> Result<Var, TensorError> {
        if m == 0 {
            return Err(TensorError::EmptyInput { op: "repeat_row" });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "repeat_row",
                    detail: format!("expected rank 1, got {:?}", t.shape()),
                });
            }
            let n = t.len();
            let mut data = Vec::with_capacity(m * n);
            for _ in 0..m {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(m, n, data)
        };
        Ok(self.push_op(Op::RepeatRow(x.id, m), value, &[x.id]))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            let numel: usize = shape.iter().product();
            if numel != t.len() || shape.is_empty() || shape.len() > 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    detail: format!("{:?} -> {:?}", t.shape(), shape),
                });
            }
            Tensor {
                data: t.data().to_vec(),
                shape: shape.to_vec(),
            }
        };
        Ok(self.push_op(Op::Reshape(x.id), value, &[x.id]))
    }

    fn unary_ew(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with(x, |t| Tensor {
            data: t.data().iter().map(|&v| f(v)).collect(),
            shape: t.shape().to_vec(),
        });
        self.push_op(op, value, &[x.id])
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary_ew(x, Op::Relu(x.id), |v| v.max(0.0))
    }

    /// Exact Gaussian-CDF gelu: `x * Phi(x)`.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary_ew(x, Op::Gelu(x.id), |v| v * phi_cdf(v))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary_ew(x, Op::Tanh(x.id), f64::tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary_ew(x, Op::Sigmoid(x.id), sigmoid)
    }

    /// Softmax over a rank-1 tensor (max-subtracted, numerically stable).
    pub fn softmax_vec(&self, x: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 1 || t.is_empty() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_vec",
                    detail: format!("expected non-empty rank 1, got {:?}", t.shape()),
                });
            }
            Tensor::vector(softmax_slice(t.data(), None))
        };
        Ok(self.push_op(Op::SoftmaxVec(x.id), value, &[x.id]))
    }

    /// Row-wise softmax; `mask[j] == false` forces column `j` to probability
    /// zero in every row (padding keys in attention).
    pub fn softmax_rows(&self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("expected rank 2, got {:?}", t.shape()),
                });
            }
            if let Some(m) = mask {
                if m.len() != t.cols() {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax_rows",
                        detail: format!("mask len {} vs {} cols", m.len(), t.cols()),
                    });
                }
                if !m.iter().any(|&keep| keep) {
                    return Err(TensorError::EmptyInput { op: "softmax_rows" });
                }
            }
            let (rows, n) = (t.rows(), t.cols());
            let mut data = vec![0.0; rows * n];
            for i in 0..rows {
                let out = softmax_slice(t.row(i), mask);
                data[i * n..(i + 1) * n].copy_from_slice(&out);
            }
            Tensor::matrix(rows, n, data)
        };
        Ok(self.push_op(
            Op::SoftmaxRows(x.id, mask.map(|m| m.to_vec())),
            value,
            &[x.id],
        ))
    }

    /// Normalizes a rank-1 tensor to zero mean, unit variance
    /// (`(x - mu) / sqrt(var + eps)`, population variance).
    pub fn layer_norm_vec(&self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 1 || t.is_empty() {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_vec",
                    detail: format!("expected non-empty rank 1, got {:?}", t.shape()),
                });
            }
            Tensor::vector(layer_norm_slice(t.data(), eps))
        };
        Ok(self.push_op(Op::LayerNormVec(x.id, eps), value, &[x.id]))
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm_rows(&self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.shape().len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_rows",
                    detail: format!("expected rank 2, got {:?}", t.shape()),
                });
            }
            let (rows, n) = (t.rows(), t.cols());
            let mut data = vec![0.0; rows * n];
            for i in 0..rows {
                let out = layer_norm_slice(t.row(i), eps);
                data[i * n..(i + 1) * n].copy_from_slice(&out);
            }
            Tensor::matrix(rows, n, data)
        };
        Ok(self.push_op(Op::LayerNormRows(x.id, eps), value, &[x.id]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let value = self.with(x, |t| Tensor::scalar(t.data().iter().sum()));
        self.push_op(Op::Sum(x.id), value, &[x.id])
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self, x: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.is_empty() {
                return Err(TensorError::EmptyInput { op: "mean" });
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        };
        Ok(self.push_op(Op::Mean(x.id), value, &[x.id]))
    }

    /// Euclidean norm of all elements as a scalar.
    pub fn norm2(&self, x: Var) -> Var {
        let value = self.with(x, |t| Tensor::scalar(t.norm2()));
        self.push_op(Op::Norm2(x.id), value, &[x.id])
    }

    /// Cross-entropy of a logits vector against a target index, fused with
    /// log-softmax for stability: `logsumexp(x) - x[target]`.
    pub fn cross_entropy(&self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.id].value;
            if t.shape().len() != 1 || t.is_empty() {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    detail: format!("expected non-empty rank 1, got {:?}", t.shape()),
                });
            }
            if target >= t.len() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: target,
                    shape: t.shape().to_vec(),
                });
            }
            let x = t.data();
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            Tensor::scalar(lse - x[target])
        };
        Ok(self.push_op(Op::CrossEntropy(logits.id, target), value, &[logits.id]))
    }

    /// Forward `x^2` with a deliberately wrong backward rule (`3x` instead
    /// of `2x`). Exists only so the finite-difference checker can prove it
    /// catches broken gradients.
    pub fn bad_square(&self, x: Var) -> Var {
        self.unary_ew(x, Op::BadSquare(x.id), |v| v * v)
    }

    /// Reverse sweep from a scalar loss; accumulates gradients into every
    /// differentiable ancestor. May be called once per graph.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got {:?}",
                    nodes[loss.id].value.shape()
                ),
            });
        }
        nodes[loss.id].grad = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad || nodes[id].grad.is_none() {
                continue;
            }
            let g = nodes[id].grad.clone().expect("grad present");
            let op = nodes[id].op.clone();
            let deltas = Self::input_deltas(&nodes, id, &op, &g);
            for (input, delta) in deltas {
                let node = &mut nodes[input];
                if !node.needs_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(t) => {
                        for (dst, src) in t.data_mut().iter_mut().zip(delta.data()) {
                            *dst += src;
                        }
                    }
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to each of its inputs.
    fn input_deltas(nodes: &[Node], id: usize, op: &Op, g: &Tensor) -> Vec<(usize, Tensor)> {
        let val = |i: usize| -> &Tensor { &nodes[i].value };
        let needs = |i: usize| nodes[i].needs_grad;
        let mut out: Vec<(usize, Tensor)> = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    let mut d = g.clone();
                    for v in d.data_mut() {
                        *v = -*v;
                    }
                    out.push((*b, d));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let mut d = g.clone();
                    for (v, &y) in d.data_mut().iter_mut().zip(val(*b).data()) {
                        *v *= y;
                    }
                    out.push((*a, d));
                }
                if needs(*b) {
                    let mut d = g.clone();
                    for (v, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                        *v *= x;
                    }
                    out.push((*b, d));
                }
            }
            Op::Neg(a) => {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v = -*v;
                }
                out.push((*a, d));
            }
            Op::Scale(a, k) => {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v *= k;
                }
                out.push((*a, d));
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g.data()[i * n + j];
                        }
                    }
                    out.push((*b, Tensor::vector(d)));
                }
            }
            Op::MatMul(a, b) => {
                // c = a b: da = g b^T, db = a^T g
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let mut d = vec![0.0; m * k];
                    mm_nt(g.data(), tb.data(), m, n, k, &mut d);
                    out.push((*a, Tensor::matrix(m, k, d)));
                }
                if needs(*b) {
                    let mut d = vec![0.0; k * n];
                    mm_tn(ta.data(), g.data(), m, k, n, &mut d);
                    out.push((*b, Tensor::matrix(k, n, d)));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    let mut d = vec![0.0; m * k];
                    mm_nn(g.data(), tb.data(), m, n, k, &mut d);
                    out.push((*a, Tensor::matrix(m, k, d)));
                }
                if needs(*b) {
                    let mut d = vec![0.0; n * k];
                    mm_tn(g.data(), ta.data(), m, n, k, &mut d);
                    out.push((*b, Tensor::matrix(n, k, d)));
                }
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (val(*w), val(*x));
                let (m, n) = (tw.rows(), tw.cols());
                if needs(*w) {
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        if gi != 0.0 {
                            for j in 0..n {
                                d[i * n + j] = gi * tx.data()[j];
                            }
                        }
                    }
                    out.push((*w, Tensor::matrix(m, n, d)));
                }
                if needs(*x) {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        if gi != 0.0 {
                            let row = &tw.data()[i * n..(i + 1) * n];
                            for j in 0..n {
                                d[j] += gi * row[j];
                            }
                        }
                    }
                    out.push((*x, Tensor::vector(d)));
                }
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        out.push((p, Tensor::vector(g.data()[off..off + len].to_vec())));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                        }
                        out.push((p, Tensor::matrix(m, w, d)));
                    }
                    off += w;
                }
            }
            Op::StackRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        out.push((p, Tensor::vector(g.row(i).to_vec())));
                    }
                }
            }
            Op::Row(a, i) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.shape());
                let n = t.cols();
                d.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
                out.push((*a, d));
            }
            Op::SliceVec(a, start, len) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.shape());
                d.data_mut()[*start..start + len].copy_from_slice(g.data());
                out.push((*a, d));
            }
            Op::Cols(a, start, len) => {
                let t = val(*a);
                let (m, n) = (t.rows(), t.cols());
                let mut d = Tensor::zeros(t.shape());
                for i in 0..m {
                    d.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(g.row(i));
                }
                out.push((*a, d));
            }
            Op::GatherRows(a, ids) => {
                let t = val(*a);
                let n = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for (k, &i) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * n..(i + 1) * n];
                    for (x, &y) in dst.iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                out.push((*a, d));
            }
            Op::RepeatRow(a, m) => {
                let n = val(*a).len();
                let mut d = vec![0.0; n];
                for i in 0..*m {
                    for j in 0..n {
                        d[j] += g.data()[i * n + j];
                    }
                }
                out.push((*a, Tensor::vector(d)));
            }
            Op::Reshape(a) => {
                let t = val(*a);
                out.push((
                    *a,
                    Tensor {
                        data: g.data().to_vec(),
                        shape: t.shape().to_vec(),
                    },
                ));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (v, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                out.push((*a, d));
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                for (v, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                    *v *= phi_cdf(x) + x * phi_pdf(x);
                }
                out.push((*a, d));
            }
            Op::Tanh(a) => {
                let y = &nodes[id].value;
                let mut d = g.clone();
                for (v, &t) in d.data_mut().iter_mut().zip(y.data()) {
                    *v *= 1.0 - t * t;
                }
                out.push((*a, d));
            }
            Op::Sigmoid(a) => {
                let y = &nodes[id].value;
                let mut d = g.clone();
                for (v, &s) in d.data_mut().iter_mut().zip(y.data()) {
                    *v *= s * (1.0 - s);
                }
                out.push((*a, d));
            }
            Op::SoftmaxVec(a) => {
                let y = nodes[id].value.data();
                let dot: f64 = g.data().iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| yi * (gi - dot))
                    .collect();
                out.push((*a, Tensor::vector(d)));
            }
            Op::SoftmaxRows(a, _mask) => {
                // Masked columns have y = 0, which zeroes their gradient.
                let y = &nodes[id].value;
                let (m, n) = (y.rows(), y.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, Tensor::matrix(m, n, d)));
            }
            Op::LayerNormVec(a, eps) => {
                let x = val(*a).data();
                let y = nodes[id].value.data();
                out.push((*a, Tensor::vector(layer_norm_backward(x, y, g.data(), *eps))));
            }
            Op::LayerNormRows(a, eps) => {
                let t = val(*a);
                let y = &nodes[id].value;
                let (m, n) = (t.rows(), t.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let di = layer_norm_backward(t.row(i), y.row(i), g.row(i), *eps);
                    d[i * n..(i + 1) * n].copy_from_slice(&di);
                }
                out.push((*a, Tensor::matrix(m, n, d)));
            }
            Op::Sum(a) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.shape());
                let gi = g.item();
                for v in d.data_mut() {
                    *v = gi;
                }
                out.push((*a, d));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.shape());
                let gi = g.item() / t.len() as f64;
                for v in d.data_mut() {
                    *v = gi;
                }
                out.push((*a, d));
            }
            Op::Norm2(a) => {
                let t = val(*a);
                let norm = t.norm2().max(1e-12);
                let gi = g.item();
                let d: Vec<f64> = t.data().iter().map(|&x| gi * x / norm).collect();
                out.push((
                    *a,
                    Tensor {
                        data: d,
                        shape: t.shape().to_vec(),
                    },
                ));
            }
            Op::CrossEntropy(a, target) => {
                let x = val(*a).data();
                let mut p = softmax_slice(x, None);
                p[*target] -= 1.0;
                let gi = g.item();
                for v in p.iter_mut() {
                    *v *= gi;
                }
                out.push((*a, Tensor::vector(p)));
            }
            Op::BadSquare(a) => {
                // Intentionally wrong on purpose: 3x instead of 2x.
                let mut d = g.clone();
                for (v, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                    *v *= 3.0 * x;
                }
                out.push((*a, d));
            }
        }
        out
    }
}

/// Standard normal CDF via the error function.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax; masked-out entries (mask false) are exactly zero.
fn softmax_slice(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut out = vec![0.0; x.len()];
    let mut sum = 0.0;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn layer_norm_slice(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().map(|&v| (v - mu) * inv).collect()
}

/// d/dx of layer_norm given input x, output y = (x-mu)/sigma and upstream g:
/// dx = (g - mean(g) - y * mean(g .* y)) / sigma
fn layer_norm_backward(x: &[f64], y: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let g_mean = g.iter().sum::<f64>() / n;
    let gy_mean = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<f64>() / n;
    g.iter()
        .zip(y)
        .map(|(&gi, &yi)| (gi - g_mean - yi * gy_mean) * inv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_frozen_values() {
        // softmax([1,2,3]) computed from exp(k)/sum(exp(1..3)).
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.softmax_vec(x).unwrap();
        vec_close(
            g.value(y).data(),
            &[0.09003057317038046, 0.24472847105479767, 0.6652409557748219],
            1e-12,
        );
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_invariant_to_shift() {
        let g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.leaf(Tensor::vector(vec![1001.0, 1002.0, 1003.0]));
        let ya = g.softmax_vec(a).unwrap();
        let yb = g.softmax_vec(b).unwrap();
        vec_close(g.value(ya).data(), g.value(yb).data(), 1e-12);
    }

    #[test]
    fn cross_entropy_frozen_value() {
        // -ln softmax([1,2,3])[2] = ln(e^1+e^2+e^3) - 3
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let ce = g.cross_entropy(x, 2).unwrap();
        assert!((g.value(ce).item() - 0.40760596444438079).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let ce = g.cross_entropy(x, 0).unwrap();
        g.backward(ce).unwrap();
        let got = g.grad(x).unwrap();
        vec_close(
            got.data(),
            &[0.09003057317038046 - 1.0, 0.24472847105479767, 0.6652409557748219],
            1e-12,
        );
    }

    #[test]
    fn cross_entropy_huge_logits_stay_finite() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1000.0, -1000.0, 999.0]));
        let ce = g.cross_entropy(x, 0).unwrap();
        assert!(g.value(ce).item().is_finite());
        g.backward(ce).unwrap();
        assert!(g.grad(x).unwrap().all_finite());
    }

    #[test]
    fn layer_norm_frozen_value() {
        // [1,-1] has mean 0 and population variance 1; eps=1e-5 shifts the
        // output away from [1,-1] by about 5e-6.
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -1.0]));
        let y = g.layer_norm_vec(x, 1e-5).unwrap();
        vec_close(g.value(y).data(), &[1.0, -1.0], 1e-4);
        let exact = 1.0 / 1.00001f64.sqrt();
        vec_close(g.value(y).data(), &[exact, -exact], 1e-15);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![4.0, 4.0, 4.0]));
        let y = g.layer_norm_vec(x, 1e-5).unwrap();
        vec_close(g.value(y).data(), &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn gelu_frozen_values() {
        // x * Phi(x) at textbook normal-CDF values.
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0, -1.0, 2.0]));
        let y = g.gelu(x);
        vec_close(
            g.value(y).data(),
            &[
                0.0,
                0.8413447460685429,
                -0.15865525393145707,
                1.9544997361036416,
            ],
            1e-12,
        );
    }

    #[test]
    fn gelu_differs_from_tanh_approximation() {
        // The tanh surrogate deviates from x*Phi(x) in the third decimal
        // around |x| ~ 2; make sure we implement the exact form.
        let x = 2.0;
        let exact = x * phi_cdf(x);
        let tanh_approx = 0.5
            * x
            * (1.0
                + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((exact - tanh_approx).abs() > 1e-5);
        let g = Graph::new();
        let v = g.leaf(Tensor::scalar(x));
        assert!((g.value(g.gelu(v)).item() - exact).abs() < 1e-15);
    }

    #[test]
    fn matmul_known_product() {
        let g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        vec_close(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0], 1e-12);
    }

    #[test]
    fn matmul_gradient_known_case() {
        // c = a*b, loss = sum(c): da = ones*b^T, db = a^T*ones
        let g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        vec_close(g.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0], 1e-12);
        vec_close(g.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0], 1e-12);
    }

    #[test]
    fn matmul_nt_equals_matmul_with_transpose() {
        let g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bt = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 2.0, 1.0, 0.0]);
        let vb = g.leaf(b);
        let vbt = g.leaf(bt);
        let c1 = g.matmul(a, vb).unwrap();
        let c2 = g.matmul_nt(a, vbt).unwrap();
        vec_close(g.value(c1).data(), g.value(c2).data(), 1e-12);
    }

    #[test]
    fn gradient_accumulates_over_shared_input() {
        // loss = sum(x) + sum(x) -> grad = 2 everywhere
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s1 = g.sum(x);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        vec_close(g.grad(x).unwrap().data(), &[2.0, 2.0], 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        vec_close(g.grad(x).unwrap().data(), &[3.0, 4.0], 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
        let y = g.softmax_rows(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(1, 1), 0.0);
        for i in 0..2 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Row 0 keeps logits [1,3]: softmax = [1/(1+e^2), e^2/(1+e^2)].
        let e2 = 2.0f64.exp();
        assert!((v.at(0, 2) - e2 / (1.0 + e2)).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_rejects_all_masked() {
        let g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(g.softmax_rows(x, Some(&[false, false])).is_err());
    }

    #[test]
    fn gather_rows_accumulates_repeated_ids() {
        let g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.gather_rows(x, &[0, 0, 1]).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        vec_close(g.grad(x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0], 1e-12);
    }

    #[test]
    fn repeat_row_backward_sums_rows() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.repeat_row(x, 3).unwrap();
        assert_eq!(g.dims(y), vec![3, 2]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        vec_close(g.grad(x).unwrap().data(), &[3.0, 3.0], 1e-12);
    }

    #[test]
    fn slice_ops_roundtrip_gradients() {
        let g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = g.cols(x, 0, 2).unwrap();
        let right = g.cols(x, 2, 1).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let loss = g.sum(back);
        g.backward(loss).unwrap();
        vec_close(g.grad(x).unwrap().data(), &[1.0; 6], 1e-12);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        let m = g.leaf(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = g.matmul(m, m).err();
        assert!(err.is_none());
        let bad = g.matmul(m, b);
        assert!(bad.is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn norm2_value_and_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let n = g.norm2(x);
        assert!((g.value(n).item() - 5.0).abs() < 1e-12);
        g.backward(n).unwrap();
        vec_close(g.grad(x).unwrap().data(), &[0.6, 0.8], 1e-12);
    }

    #[test]
    fn reshape_preserves_data_and_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let v = g.reshape(x, &[4]).unwrap();
        assert_eq!(g.value(v).shape(), &[4]);
        let loss = g.sum(v);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().shape(), &[2, 2]);
    }
}
