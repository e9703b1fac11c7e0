//! Small dense linear algebra: Householder least squares and a Jacobi SVD for
//! numerical rank.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("zero pivot at column {index}")]
    ZeroPivot { index: usize },
    #[error("underdetermined system: {rows} rows for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::Dimension {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[T]) -> Result<Vec<T>, LinalgError> {
        if x.len() != self.cols {
            return Err(LinalgError::Dimension {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn mul(&self, other: &Matrix<T>) -> Result<Self, LinalgError> {
        if other.rows != self.cols {
            return Err(LinalgError::Dimension {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Each row multiplied by the matching entry of `s`.
    pub fn scale_rows(&self, s: &[T]) -> Result<Self, LinalgError> {
        if s.len() != self.rows {
            return Err(LinalgError::Dimension {
                expected: self.rows,
                actual: s.len(),
            });
        }
        let mut out = self.clone();
        for (i, &k) in s.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= k;
            }
        }
        Ok(out)
    }

    fn column_norm(&self, j: usize, from: usize) -> T {
        (from..self.rows)
            .map(|i| self[(i, j)] * self[(i, j)])
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {row:?}")?;
        }
        Ok(())
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Pivots below this fraction of the largest column norm count as zero.
fn pivot_tolerance<T: Scalar>() -> T {
    T::epsilon() * T::of(1e4)
}

/// Minimises `‖A·x − b‖₂` by Householder QR without column pivoting, so a
/// rank deficiency is reported at the first dependent column.
pub fn least_squares<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(LinalgError::Dimension {
            expected: m,
            actual: b.len(),
        });
    }
    if m < n {
        return Err(LinalgError::Underdetermined { rows: m, cols: n });
    }
    let mut r = a.clone();
    let mut y = b.to_vec();
    let scale = (0..n).map(|j| r.column_norm(j, 0)).fold(T::zero(), T::max);
    let tol = pivot_tolerance::<T>() * scale;
    for k in 0..n {
        let alpha_abs = r.column_norm(k, k);
        if alpha_abs <= tol {
            return Err(LinalgError::ZeroPivot { index: k });
        }
        let alpha = if r[(k, k)] > T::zero() {
            -alpha_abs
        } else {
            alpha_abs
        };
        let mut v: Vec<T> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::of(2.0);
        for j in k..n {
            let s = (k..m).fold(T::zero(), |acc, i| acc + v[i - k] * r[(i, j)]) * two / vnorm2;
            for i in k..m {
                r[(i, j)] -= s * v[i - k];
            }
        }
        let s = (k..m).fold(T::zero(), |acc, i| acc + v[i - k] * y[i]) * two / vnorm2;
        for i in k..m {
            y[i] -= s * v[i - k];
        }
    }
    let mut x = vec![T::zero(); n];
    for k in (0..n).rev() {
        let mut s = y[k];
        for j in k + 1..n {
            s -= r[(k, j)] * x[j];
        }
        x[k] = s / r[(k, k)];
    }
    Ok(x)
}

/// Singular values in descending order, by one-sided Jacobi rotations.
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    let mut u = if a.rows >= a.cols {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = (u.rows, u.cols);
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for i in 0..m {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = (0..n).map(|j| u.column_norm(j, 0)).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Count of singular values above `rel_tol` times the largest.
pub fn numerical_rank<T: Scalar>(a: &Matrix<T>, rel_tol: T) -> usize {
    let sv = singular_values(a);
    let Some(&largest) = sv.first() else {
        return 0;
    };
    if largest == T::zero() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * largest).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn square_solve() {
        let a = m(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let x = least_squares(&a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14);
        assert!((x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn overdetermined_line_fit() {
        // y = 1 + 2t plus offsets orthogonal to both columns.
        let a = m(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 3.0]]);
        let x = least_squares(&a, &[1.5, 2.5, 4.5, 7.5]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dependent_column_reported() {
        let a = m(&[
            &[1.0, 2.0, 0.0],
            &[2.0, 4.0, 1.0],
            &[3.0, 6.0, 0.0],
            &[0.0, 0.0, 1.0],
        ]);
        assert_eq!(
            least_squares(&a, &[0.0; 4]),
            Err(LinalgError::ZeroPivot { index: 1 })
        );
        assert_eq!(
            least_squares(&m(&[&[1.0, 2.0]]), &[1.0]),
            Err(LinalgError::Underdetermined { rows: 1, cols: 2 })
        );
    }

    #[test]
    fn svd_known_values() {
        let a = m(&[&[3.0, 0.0], &[0.0, -2.0], &[0.0, 0.0]]);
        let sv = singular_values(&a);
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 2.0).abs() < 1e-14);
        let b = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let sv = singular_values(&b);
        assert!((sv[0] - 2.0).abs() < 1e-14 && sv[1].abs() < 1e-14);
        assert_eq!(numerical_rank(&b, 1e-8), 1);
        assert_eq!(numerical_rank(&Matrix::<f64>::identity(5), 1e-8), 5);
        assert_eq!(numerical_rank(&Matrix::<f64>::zeros(3, 3), 1e-8), 0);
    }

    #[test]
    fn f32_solve() {
        let a =
            Matrix::<f32>::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0], vec![0.0, 1.0]]).unwrap();
        let x_true = [0.5f32, -1.0];
        let b = a.mul_vec(&x_true).unwrap();
        let x = least_squares(&a, &b).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-5 && (x[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn products() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = a.mul(&a.transpose()).unwrap();
        assert_eq!(p, m(&[&[5.0, 11.0], &[11.0, 25.0]]));
        assert_eq!(a.mul(&Matrix::identity(2)).unwrap(), a);
        assert_eq!(
            a.scale_rows(&[2.0, 0.5]).unwrap(),
            m(&[&[2.0, 4.0], &[1.5, 2.0]])
        );
        assert!(a.mul_vec(&[1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Singular values squared sum to the Frobenius norm squared.
            #[test]
            fn svd_frobenius(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
                let a = Matrix::from_rows(&vals.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap();
                let fro: f64 = vals.iter().map(|v| v * v).sum();
                let s2: f64 = singular_values(&a).iter().map(|s| s * s).sum();
                prop_assert!((fro - s2).abs() <= 1e-10 * fro.max(1.0));
            }

            // Diagonally dominant square systems are recovered exactly.
            #[test]
            fn recovers_solution(x in proptest::collection::vec(-3.0f64..3.0, 4), off in proptest::collection::vec(-1.0f64..1.0, 16)) {
                let mut a = Matrix::zeros(4, 4);
                for i in 0..4 {
                    for j in 0..4 {
                        a[(i, j)] = if i == j { 8.0 } else { off[i * 4 + j] };
                    }
                }
                let b = a.mul_vec(&x).unwrap();
                let xh = least_squares(&a, &b).unwrap();
                for (p, q) in x.iter().zip(&xh) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
