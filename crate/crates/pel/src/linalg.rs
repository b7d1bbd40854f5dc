//! Small dense linear algebra helpers used by the solver, inference, and the
//! Gaussian sampler. Everything here is generic over the scalar type and
//! deliberately dependency-free; the matrices involved are tiny (selected
//! supports) or factorized once per experiment (covariance roots).

use serde::Serialize;

use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            *m.at_mut(i, i) = F::one();
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat<F> {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *t.at_mut(j, i) = self.at(i, j);
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == F::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    *out.at_mut(i, j) = out.at(i, j) + a * other.at(k, j);
                }
            }
        }
        out
    }

    /// `self * v` for a vector `v`.
    pub fn matvec(&self, v: &[F]) -> Vec<F> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        let mut out = vec![F::zero(); self.rows];
        for i in 0..self.rows {
            let mut acc = F::zero();
            let row = self.row(i);
            for j in 0..self.cols {
                acc = acc + row[j] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn max_abs_asymmetry(&self) -> F {
        assert_eq!(self.rows, self.cols);
        let mut worst = F::zero();
        for i in 0..self.rows {
            for j in 0..i {
                let d = (self.at(i, j) - self.at(j, i)).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }
}

/// Lower-triangular Cholesky factor `L` with `L L' = a`; `None` if the matrix
/// is not (numerically) positive definite.
pub fn cholesky<F: Real>(a: &Mat<F>) -> Option<Mat<F>> {
    assert_eq!(a.rows, a.cols, "cholesky needs a square matrix");
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for k in 0..j {
                sum = sum - l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= F::zero() || !sum.is_finite() {
                    return None;
                }
                *l.at_mut(i, j) = sum.sqrt();
            } else {
                *l.at_mut(i, j) = sum / l.at(j, j);
            }
        }
    }
    Some(l)
}

/// Solve `L L' x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<F: Real>(l: &Mat<F>, b: &[F]) -> Vec<F> {
    let n = l.rows;
    assert_eq!(b.len(), n);
    let mut y = b.to_vec();
    // forward
    for i in 0..n {
        let mut acc = y[i];
        for k in 0..i {
            acc = acc - l.at(i, k) * y[k];
        }
        y[i] = acc / l.at(i, i);
    }
    // backward
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in i + 1..n {
            acc = acc - l.at(k, i) * y[k];
        }
        y[i] = acc / l.at(i, i);
    }
    y
}

/// Inverse of a symmetric positive definite matrix from its Cholesky factor.
pub fn cholesky_inverse<F: Real>(l: &Mat<F>) -> Mat<F> {
    let n = l.rows;
    let mut inv = Mat::zeros(n, n);
    let mut e = vec![F::zero(); n];
    for j in 0..n {
        e[j] = F::one();
        let col = cholesky_solve(l, &e);
        for i in 0..n {
            *inv.at_mut(i, j) = col[i];
        }
        e[j] = F::zero();
    }
    // symmetrize to scrub round-off
    for i in 0..n {
        for j in 0..i {
            let m = (inv.at(i, j) + inv.at(j, i)) / F::of(2.0);
            *inv.at_mut(i, j) = m;
            *inv.at_mut(j, i) = m;
        }
    }
    inv
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method, ascending.
pub fn symmetric_eigenvalues<F: Real>(a: &Mat<F>) -> Vec<F> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    let tol = F::of(1e-14);
    for _sweep in 0..100 {
        let mut off = F::zero();
        for i in 0..n {
            for j in i + 1..n {
                off = off + m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() <= tol * (F::one() + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == F::zero() {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (F::of(2.0) * apq);
                let t = if theta >= F::zero() {
                    F::one() / (theta + (F::one() + theta * theta).sqrt())
                } else {
                    -F::one() / (-theta + (F::one() + theta * theta).sqrt())
                };
                let c = F::one() / (F::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    *m.at_mut(k, p) = c * mkp - s * mkq;
                    *m.at_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    *m.at_mut(p, k) = c * mpk - s * mqk;
                    *m.at_mut(q, k) = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<F> = (0..n).map(|i| m.at(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).expect("non-finite eigenvalue"));
    eig
}

fn frobenius<F: Real>(m: &Mat<F>) -> F {
    m.data.iter().map(|&x| x * x).sum::<F>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat { rows, cols, data: v.to_vec() }
    }

    #[test]
    fn cholesky_round_trip() {
        let a = mat(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve(&l, &[2.0, 1.0]);
        // verify A x = b
        let b = a.matvec(&x);
        assert!((b[0] - 2.0).abs() < 1e-12);
        assert!((b[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = mat(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&a).is_none());
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        let a = mat(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = symmetric_eigenvalues(&a);
        assert!((e[0] - 1.0).abs() < 1e-10);
        assert!((e[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn inverse_matches_identity() {
        let a = mat(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky(&a).unwrap();
        let inv = cholesky_inverse(&l);
        let prod = a.matmul(&inv);
        let id = Mat::<f64>::identity(3);
        for (x, y) in prod.data.iter().zip(id.data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
