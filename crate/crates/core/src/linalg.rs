//! Small dense helpers: Cholesky factorization and SPD solves.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("right-hand side has length {got}, expected {expected}")]
    RhsLength { expected: usize, got: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Array2<T>,
}

/// Dot product with four independent accumulators.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() / 4 * 4;
    let mut acc = [T::zero(); 4];
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<T: Real> Cholesky<T> {
    pub fn factor(a: ArrayView2<'_, T>) -> Result<Self, LinalgError> {
        let (rows, cols) = a.dim();
        if rows != cols {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        let n = rows;
        // row-major storage: row i of L holds L[i, 0..=i]
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let row_j: Vec<T> = l[j * n..j * n + j].to_vec();
            let diag = a[[j, j]] - dot(&row_j, &row_j);
            if !(diag > T::zero()) || !diag.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: diag.to_f64_lossy(),
                });
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let v = a[[i, j]] - dot(&l[i * n..i * n + j], &row_j);
                l[i * n + j] = v / ljj;
            }
        }
        Ok(Self {
            lower: Array2::from_shape_vec((n, n), l).expect("square"),
        })
    }

    pub fn lower(&self) -> &Array2<T> {
        &self.lower
    }

    pub fn solve(&self, b: ArrayView1<'_, T>) -> Result<Array1<T>, LinalgError> {
        let n = self.lower.nrows();
        if b.len() != n {
            return Err(LinalgError::RhsLength {
                expected: n,
                got: b.len(),
            });
        }
        let l = self.lower.as_slice().expect("standard layout");
        // forward: L z = b
        let mut z = vec![T::zero(); n];
        for i in 0..n {
            z[i] = (b[i] - dot(&l[i * n..i * n + i], &z[..i])) / l[i * n + i];
        }
        // backward: Lᵀ x = z, as column updates on the rows of L
        let mut x = z;
        for i in (0..n).rev() {
            x[i] /= l[i * n + i];
            let xi = x[i];
            for k in 0..i {
                x[k] -= l[i * n + k] * xi;
            }
        }
        Ok(Array1::from_vec(x))
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd<T: Real>(a: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Result<Array1<T>, LinalgError> {
    Cholesky::factor(a)?.solve(b)
}
