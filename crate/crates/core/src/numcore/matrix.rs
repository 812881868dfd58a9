//! Dense row-major `f64` matrix.

use crate::error::{Error, Result};
use std::ops::{Index, IndexMut};

/// Dense row-major matrix of 64-bit floats.
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

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len().to_string(),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("matrix entry {bad}"),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`, shape (n×k)·(k×m) → n×m.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, shape (n×k)·(m×k)ᵀ → n×m.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_transpose",
                format!("inner dim {}", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "add_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += scale * s;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-normalizes every row; zero rows are passed through unchanged and their
/// indices reported.
pub fn l2_normalize_rows(m: &Matrix) -> (Matrix, Vec<usize>) {
    let mut out = m.clone();
    let mut zero_rows = Vec::new();
    for r in 0..m.rows() {
        let norm = dot(m.row(r), m.row(r)).sqrt();
        if norm == 0.0 {
            zero_rows.push(r);
        } else {
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
    }
    (out, zero_rows)
}

/// Backward pass of [`l2_normalize_rows`].
///
/// Given the pre-normalization input `raw`, and the gradient `d_unit` w.r.t.
/// the unit rows, returns the gradient w.r.t. `raw`. Flagged zero rows get a
/// zero gradient.
pub fn l2_normalize_rows_backward(raw: &Matrix, d_unit: &Matrix) -> Result<Matrix> {
    if raw.rows() != d_unit.rows() || raw.cols() != d_unit.cols() {
        return Err(Error::shape(
            "l2_normalize_rows_backward",
            format!("{}x{}", raw.rows(), raw.cols()),
            format!("{}x{}", d_unit.rows(), d_unit.cols()),
        ));
    }
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let x = raw.row(r);
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            continue;
        }
        let g = d_unit.row(r);
        // y = x/‖x‖, dx = (g − y·(g·y)) / ‖x‖
        let y: Vec<f64> = x.iter().map(|&v| v / norm).collect();
        let gy = dot(g, &y);
        for (o, (gi, yi)) in out.row_mut(r).iter_mut().zip(g.iter().zip(&y)) {
            *o = (gi - yi * gy) / norm;
        }
    }
    Ok(out)
}
