//! Dense symmetric positive-definite solves.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor `L` of an SPD matrix `A = L L^T`.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    n: usize,
    lower: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors a row-major `n x n` symmetric matrix. Pivots that fall below
    /// `n * eps * max(diag)` are reported as singular.
    pub fn factor(a: &[T], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n, "Cholesky::factor expects an n x n matrix");
        let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(T::zero(), T::max);
        let tol = T::epsilon() * T::of(n as f64) * max_diag;
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut diag = a[j * n + j];
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if diag.is_nan() || diag <= tol {
                return Err(Error::Singular("Cholesky factorization"));
            }
            let djj = diag.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= l[i * n + k] * z[k];
            }
            z[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s -= l[k * n + i] * z[k];
            }
            z[i] = s / l[i * n + i];
        }
        z
    }
}
