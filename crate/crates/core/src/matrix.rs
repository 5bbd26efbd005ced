//! Dense row-major `f64` matrix with the handful of products the
//! calibration loop needs. Loop order is fixed so results are reproducible
//! bit for bit.

use crate::error::{QuantError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QuantError::ShapeMismatch {
                what: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Self> {
        let first = parts.first().ok_or(QuantError::Empty("vstack input"))?;
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(QuantError::ShapeMismatch {
                    what: "vstack columns",
                    expected: cols,
                    got: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        check_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; for token rows `X` and a weight `W` (out × in) this is
    /// the linear layer output `X Wᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Self> {
        check_dim("matmul_nt inner dimension", self.cols, other.cols)?;
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Self> {
        check_dim("matmul_tn shared rows", self.rows, other.rows)?;
        let mut out = Self::zeros(self.cols, other.cols);
        for t in 0..self.rows {
            let a = self.row(t);
            let b = other.row(t);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (oj, &bj) in out.row_mut(i).iter_mut().zip(b) {
                    *oj += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        check_dim("add rows", self.rows, other.rows)?;
        check_dim("add cols", self.cols, other.cols)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        check_dim("sub rows", self.rows, other.rows)?;
        check_dim("sub cols", self.cols, other.cols)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(QuantError::ShapeMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0);
        let b = Matrix::from_fn(2, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let nt = a.matmul_nt(&b).unwrap();
        let plain = a.matmul(&b.transpose()).unwrap();
        assert_eq!(nt, plain);
        let tn = a.matmul_tn(&a).unwrap();
        assert_eq!(tn, a.transpose().matmul(&a).unwrap());
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&a).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
