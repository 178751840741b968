//! Small dense matrices and LU-based determinant / inverse.
//!
//! Only bordered distance matrices pass through here, so dimensions are
//! capped at 16 (simplices up to 15 vertices). Everything is `f64`.

use crate::error::{Error, Result};

/// Largest supported square dimension (simplices up to 15 vertices).
pub const MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix wants {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("matrix construction: non-finite entry"));
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
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    fn require_square(&self, op: &str) -> Result<usize> {
        if self.rows != self.cols {
            return Err(Error::shape(format!(
                "{op} needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.rows > MAX_DIM {
            return Err(Error::parameter(format!(
                "{op} supports dimension <= {MAX_DIM}, got {}",
                self.rows
            )));
        }
        Ok(self.rows)
    }

    /// LU factorization with partial pivoting.
    ///
    /// Returns the packed LU matrix, the row permutation, and the
    /// permutation sign. A zero pivot marks a singular matrix.
    fn lu(&self) -> Result<(Vec<f64>, Vec<usize>, f64)> {
        let n = self.rows;
        let mut a = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_abs = a[col * n + col].abs();
            for r in (col + 1)..n {
                let v = a[r * n + col].abs();
                if v > pivot_abs {
                    pivot_abs = v;
                    pivot_row = r;
                }
            }
            if pivot_row != col {
                for c in 0..n {
                    a.swap(col * n + c, pivot_row * n + c);
                }
                perm.swap(col, pivot_row);
                sign = -sign;
            }
            let pivot = a[col * n + col];
            if pivot == 0.0 {
                // Singular: determinant is exactly 0, inverse impossible.
                continue;
            }
            for r in (col + 1)..n {
                let factor = a[r * n + col] / pivot;
                a[r * n + col] = factor;
                for c in (col + 1)..n {
                    a[r * n + c] -= factor * a[col * n + c];
                }
            }
        }
        Ok((a, perm, sign))
    }

    /// Determinant via LU with partial pivoting; exact sign preserved.
    pub fn determinant(&self) -> Result<f64> {
        let n = self.require_square("determinant")?;
        if n == 0 {
            return Ok(1.0);
        }
        let (lu, _, sign) = self.lu()?;
        let mut det = sign;
        for i in 0..n {
            det *= lu[i * n + i];
        }
        Ok(det)
    }

    /// Inverse via LU solves against the identity.
    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.require_square("inverse")?;
        let (lu, perm, _) = self.lu()?;
        for i in 0..n {
            if lu[i * n + i] == 0.0 {
                return Err(Error::numeric("inverse of singular matrix"));
            }
        }
        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            // Solve A x = e_j using the permuted RHS.
            for i in 0..n {
                col[i] = if perm[i] == j { 1.0 } else { 0.0 };
            }
            for i in 0..n {
                for k in 0..i {
                    col[i] -= lu[i * n + k] * col[k];
                }
            }
            for i in (0..n).rev() {
                for k in (i + 1)..n {
                    col[i] -= lu[i * n + k] * col[k];
                }
                col[i] /= lu[i * n + i];
            }
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        Ok(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Cofactor-expansion determinant; exponential but fine for n <= 6.
    fn det_cofactor(m: &Matrix) -> f64 {
        let n = m.rows();
        if n == 1 {
            return m.get(0, 0);
        }
        let mut det = 0.0;
        for j in 0..n {
            let mut minor = Matrix::zeros(n - 1, n - 1);
            for r in 1..n {
                let mut cc = 0;
                for c in 0..n {
                    if c == j {
                        continue;
                    }
                    minor.set(r - 1, cc, m.get(r, c));
                    cc += 1;
                }
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * m.get(0, j) * det_cofactor(&minor);
        }
        det
    }

    fn random_matrix(n: usize, rng: &mut RngState) -> Matrix {
        let data: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        Matrix::new(n, n, data).unwrap()
    }

    #[test]
    fn identity_det_is_one() {
        assert_eq!(Matrix::identity(3).determinant().unwrap(), 1.0);
    }

    #[test]
    fn swap_matrix_det_is_minus_one() {
        let m = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.determinant().unwrap(), -1.0);
    }

    #[test]
    fn non_square_rejected() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(m.determinant(), Err(Error::Shape(_))));
    }

    #[test]
    fn oversize_rejected() {
        let m = Matrix::zeros(MAX_DIM + 1, MAX_DIM + 1);
        assert!(matches!(m.determinant(), Err(Error::Parameter(_))));
    }

    #[test]
    fn seeded_5x5_matches_cofactor_oracle() {
        let mut rng = RngState::new(5);
        for _ in 0..20 {
            let m = random_matrix(5, &mut rng);
            let lu = m.determinant().unwrap();
            let oracle = det_cofactor(&m);
            let rel = (lu - oracle).abs() / oracle.abs().max(1e-300);
            assert!(rel < 1e-10, "lu={lu} oracle={oracle}");
        }
    }

    #[test]
    fn determinant_is_multiplicative() {
        let mut rng = RngState::new(17);
        for _ in 0..50 {
            let a = random_matrix(4, &mut rng);
            let b = random_matrix(4, &mut rng);
            let ab = a.matmul(&b).unwrap();
            let lhs = ab.determinant().unwrap();
            let rhs = a.determinant().unwrap() * b.determinant().unwrap();
            let rel = (lhs - rhs).abs() / rhs.abs().max(1e-12);
            assert!(rel < 1e-8, "det(AB)={lhs} det(A)det(B)={rhs}");
        }
    }

    #[test]
    fn inverse_roundtrip() {
        let mut rng = RngState::new(23);
        for _ in 0..20 {
            let a = random_matrix(6, &mut rng);
            if a.determinant().unwrap().abs() < 1e-6 {
                continue;
            }
            let inv = a.inverse().unwrap();
            let prod = a.matmul(&inv).unwrap();
            let id = Matrix::identity(6);
            for i in 0..6 {
                for j in 0..6 {
                    assert!(
                        (prod.get(i, j) - id.get(i, j)).abs() < 1e-8,
                        "A*inv(A) not identity at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn singular_inverse_rejected() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(m.inverse().is_err());
        assert_eq!(m.determinant().unwrap(), 0.0);
    }
}
