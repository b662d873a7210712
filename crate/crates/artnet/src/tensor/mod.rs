//! Dense `f64` tensors (rank 1 and 2) and a tape-based reverse-mode
//! autodiff graph built on top of them.
//!
//! Everything downstream of this module differentiates through [`Graph`];
//! the tensor type itself is a plain row-major buffer with shape checks.

mod check;
mod graph;
mod kernels;

pub use check::{finite_diff_check, finite_diff_check_inputs, rel_err, CheckReport, DEFAULT_H, DEFAULT_TOL};
pub use graph::{Graph, Var};

use thiserror::Error;

/// Errors raised by shape-sensitive tensor and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of bounds for {op} on shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op} requires a non-empty input list")]
    EmptyInput { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Row-major `f64` tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    /// Rank-1 tensor from a value vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            data,
            shape: vec![n],
        }
    }

    /// Rank-2 tensor from row-major data; `data.len()` must equal
    /// `rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor {
            data,
            shape: vec![rows, cols],
        }
    }

    /// All-zero tensor with the given shape (rank 1 or 2).
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "only rank 1 and 2 supported, got {shape:?}"
        );
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// Scalar wrapped as a rank-1 tensor of length 1.
    pub fn scalar(v: f64) -> Self {
        Tensor::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows; a vector is treated as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns; for a vector this is its length.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }

    /// Value of a scalar tensor (length-1 of any rank).
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.len());
        self.data[0]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescale so the Euclidean norm is 1; leaves the zero vector alone.
    pub fn normalized(&self) -> Tensor {
        let n = self.norm2();
        if n == 0.0 {
            return self.clone();
        }
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v /= n;
        }
        out
    }
}

/// Cosine similarity between two equal-length slices; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine on mismatched lengths");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}
