//! Dense row-major f64 matrices and the handful of operations the rest of
//! the crate needs. Small problems only; no BLAS.

use crate::error::{BremenError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(BremenError::shape(
                "Matrix::new",
                rows * cols,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BremenError::NonFinite("Matrix::new".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`. Parallel over output rows for large products.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        let a = &self.data;
        let b = &other.data;
        let work = n * k * m;
        let kernel = |r: usize, row_out: &mut [f64]| {
            let arow = &a[r * k..(r + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * m..(kk + 1) * m];
                for (c, &bv) in brow.iter().enumerate() {
                    row_out[c] += av * bv;
                }
            }
        };
        if work > 32_768 {
            crate::exec::for_each_chunk(&mut out.data, m, kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(|(r, c)| kernel(r, c));
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves `A x = b` for square A by Gaussian elimination with partial
/// pivoting. `b` may have multiple columns.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(BremenError::shape("solve", n, a.cols().max(b.rows())));
    }
    let m = b.cols();
    let mut aug = vec![0.0; n * (n + m)];
    for r in 0..n {
        aug[r * (n + m)..r * (n + m) + n].copy_from_slice(a.row(r));
        aug[r * (n + m) + n..(r + 1) * (n + m)].copy_from_slice(b.row(r));
    }
    let w = n + m;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                aug[i * w + col]
                    .abs()
                    .total_cmp(&aug[j * w + col].abs())
            })
            .unwrap();
        if aug[pivot * w + col].abs() < 1e-300 {
            return Err(BremenError::Format("singular system in solve".into()));
        }
        if pivot != col {
            for c in 0..w {
                aug.swap(col * w + c, pivot * w + c);
            }
        }
        let inv = 1.0 / aug[col * w + col];
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug[r * w + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for c in col..w {
                aug[r * w + c] -= factor * aug[col * w + c];
            }
        }
    }
    let mut out = Matrix::zeros(n, m);
    for r in 0..n {
        let inv = 1.0 / aug[r * w + r];
        for c in 0..m {
            out.set(r, c, aug[r * w + n + c] * inv);
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn quadratic_form(p: &Matrix, s: &[f64]) -> f64 {
    let n = p.rows();
    assert_eq!(s.len(), n);
    let mut acc = 0.0;
    for r in 0..n {
        let row = p.row(r);
        acc += s[r] * dot(row, s);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = Matrix::identity(3);
        assert_eq!(a.matmul(&i), a);
    }

    #[test]
    fn solve_simple() {
        let a = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![2.0, 8.0]).unwrap();
        let x = solve(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn solve_pivoting() {
        let a = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 7.0]).unwrap();
        let x = solve(&a, &b).unwrap();
        assert!((x.get(0, 0) - 7.0).abs() < 1e-12);
        assert!((x.get(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }
}
