//! Dense rank-revealing helpers built on a one-sided Jacobi SVD.
//!
//! Jacobi rotations give singular values to full relative accuracy on the
//! small matrices used here; LAPACK-style bidiagonal QR occasionally loses
//! digits on matrices with exact zero structure, which FD ranks cannot absorb.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

/// Thin SVD with singular values sorted in descending order.
#[derive(Debug, Clone)]
pub struct SortedSvd<T: Real> {
    pub u: DMatrix<T>,
    pub s: DVector<T>,
    pub v_t: DMatrix<T>,
    /// Number of columns of the decomposed matrix.
    pub ncols: usize,
}

impl<T: Real> SortedSvd<T> {
    pub fn new(a: &DMatrix<T>) -> Self {
        let (r, c) = a.shape();
        if r == 0 || c == 0 {
            return SortedSvd { u: DMatrix::zeros(r, 0), s: DVector::zeros(0), v_t: DMatrix::zeros(0, c), ncols: c };
        }
        if r >= c {
            let (u, s, v) = jacobi(a.clone());
            SortedSvd { u, s, v_t: v.transpose(), ncols: c }
        } else {
            let (v, s, u) = jacobi(a.transpose());
            SortedSvd { u, s, v_t: v.transpose(), ncols: c }
        }
    }

    pub fn sigma_max(&self) -> T {
        self.s.iter().copied().next().unwrap_or_else(T::zero)
    }

    /// Count of singular values above `threshold`.
    pub fn rank_above(&self, threshold: T) -> usize {
        self.s.iter().filter(|&&x| x > threshold).count()
    }

    /// Rank at relative tolerance `rel` (threshold `rel * sigma_max`).
    pub fn rank(&self, rel: T) -> usize {
        self.rank_above(rel * self.sigma_max())
    }

    /// Orthonormal basis (as rows) of the right null space complementing the
    /// leading `rank` singular directions.
    pub fn null_rows(&self, rank: usize) -> DMatrix<T> {
        let n = self.ncols;
        let full = if self.v_t.nrows() == n { self.v_t.clone() } else { complete_rows(&self.v_t, n) };
        full.rows(rank, n - rank).into_owned()
    }

    /// Pseudo-inverse truncated to the leading `rank` singular values.
    pub fn pinv(&self, rank: usize) -> DMatrix<T> {
        let (m, n) = (self.u.nrows(), self.ncols);
        let mut out = DMatrix::zeros(n, m);
        for k in 0..rank.min(self.s.len()) {
            let inv = T::one() / self.s[k];
            for i in 0..n {
                let vi = self.v_t[(k, i)] * inv;
                for j in 0..m {
                    out[(i, j)] += vi * self.u[(j, k)];
                }
            }
        }
        out
    }

    /// Leading `rank` right singular vectors as columns.
    pub fn leading_right(&self, rank: usize) -> DMatrix<T> {
        self.v_t.rows(0, rank).transpose()
    }
}

const JACOBI_SWEEPS: usize = 60;

/// One-sided Jacobi SVD of a tall matrix `a` (rows ≥ cols):
/// `a = u diag(s) vᵀ`, `s` descending, `u` with orthonormal columns.
fn jacobi<T: Real>(mut a: DMatrix<T>) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
    let (m, n) = a.shape();
    let mut v = DMatrix::<T>::identity(n, n);
    let eps = T::default_epsilon();
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (a.column(p), a.column(q));
                let alpha = cp.norm_squared();
                let beta = cq.norm_squared();
                let gamma = cp.dot(&cq);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let t = if zeta == T::zero() { T::one() } else { t };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<T> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let s = DVector::from_fn(n, |k, _| norms[order[k]]);
    let v = DMatrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    // zero columns get an arbitrary orthonormal completion
    let sig_max = s.iter().copied().next().unwrap_or_else(T::zero);
    let floor = sig_max * eps * T::lit(n as f64);
    let mut cols: Vec<DVector<T>> = Vec::with_capacity(n);
    for k in 0..n {
        if s[k] > floor && s[k] > T::zero() {
            cols.push(a.column(order[k]) / s[k]);
        }
    }
    let live = cols.len();
    let full = complete_rows(&DMatrix::from_fn(live, m, |k, i| cols[k][i]), m);
    let u = DMatrix::from_fn(m, n, |i, k| full[(k, i)]);
    (u, s, v)
}

/// Extend orthonormal rows to a full orthonormal basis of R^n by
/// Gram-Schmidt against the coordinate vectors.
fn complete_rows<T: Real>(rows: &DMatrix<T>, n: usize) -> DMatrix<T> {
    let mut basis: Vec<DVector<T>> = rows.row_iter().map(|r| r.transpose()).collect();
    let tiny = T::lit(1e-8);
    for e in 0..n {
        if basis.len() == n {
            break;
        }
        let mut x = DVector::from_fn(n, |i, _| if i == e { T::one() } else { T::zero() });
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&x);
                x -= b * c;
            }
        }
        let nx = x.norm();
        if nx > tiny {
            basis.push(x / nx);
        }
    }
    DMatrix::from_fn(basis.len(), n, |k, j| basis[k][j])
}

/// Orthonormal basis, as columns, of the range of a symmetric projector
/// with known rank.
pub fn range_basis<T: Real>(projector: &DMatrix<T>, rank: usize) -> DMatrix<T> {
    let svd = SortedSvd::new(projector);
    svd.u.columns(0, rank.min(svd.u.ncols())).into_owned()
}

/// Minimal-norm least-squares solution of `a x = b` at relative rank
/// tolerance `rel`.
pub fn lstsq<T: Real>(a: &DMatrix<T>, b: &DVector<T>, rel: T) -> DVector<T> {
    let svd = SortedSvd::new(a);
    let r = svd.rank(rel);
    svd.pinv(r) * b
}

pub fn max_abs<T: Real>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(a: &DMatrix<T>) -> T {
    SortedSvd::new(a).sigma_max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_and_rank() {
        let a = DMatrix::<f64>::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
        let svd = SortedSvd::new(&a);
        assert_eq!(svd.s.as_slice(), &[5.0, 1.0, 0.0]);
        assert_eq!(svd.rank(1e-9), 2);
        let null = svd.null_rows(2);
        assert_eq!(null.nrows(), 1);
        assert!((null[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_matrix_null_space_is_completed() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let svd = SortedSvd::new(&a);
        let null = svd.null_rows(1);
        assert_eq!(null.nrows(), 2);
        assert!((&a * null.transpose()).norm() < 1e-12);
        assert!((&null * null.transpose() - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn min_norm_solution() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let x = lstsq(&a, &DVector::from_vec(vec![2.0]), 1e-12);
        assert!((x - DVector::from_vec(vec![1.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn empty_matrices() {
        let a = DMatrix::<f64>::zeros(0, 2);
        let svd = SortedSvd::new(&a);
        assert_eq!(svd.rank(1e-9), 0);
        assert_eq!(svd.null_rows(0).nrows(), 2);
    }
}
