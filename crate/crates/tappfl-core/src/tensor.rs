//! Flat row-major containers for parameters and batches.

use crate::error::{Error, Result};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named-by-id parameter array. Ids identify tensors on a gradient tape;
/// clones keep the id so a broadcast copy accumulates into the same slot.
/// Equality ignores the id: two tensors are equal iff shape and bits match.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || len != data.len() {
            return Err(Error::ShapeMismatch {
                context: String::from("tensor shape does not match data length"),
            });
        }
        Ok(ParamTensor {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn id(&self) -> u64 {
        self.id
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

    /// One plain SGD step: `p <- p - lr * g`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: String::from("gradient length does not match parameter length"),
            });
        }
        for (p, g) in self.data.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }
}

impl PartialEq for ParamTensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A row-major `rows x cols` batch of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: String::from("flat data length does not match rows*cols"),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty { what: "matrix rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: String::from("ragged rows"),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along columns; all parts must share the row count.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        if parts.is_empty() {
            return Err(Error::Empty {
                what: "concat parts",
            });
        }
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::ShapeMismatch {
                context: String::from("concat parts disagree on row count"),
            });
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                out.data[r * cols + at..r * cols + at + p.cols].copy_from_slice(p.row(r));
                at += p.cols;
            }
        }
        Ok(out)
    }
}

/// Order-insensitive fingerprint input: folds the exact bit patterns of a
/// parameter list in sequence. Used to assert "unchanged" cheaply.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a ParamTensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &d in t.shape() {
            h ^= d as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        for v in t.data() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}
