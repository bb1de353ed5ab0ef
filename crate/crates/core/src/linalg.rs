//! Small symmetric-matrix toolkit on top of nalgebra.
//!
//! Every square root and inverse goes through a symmetric eigendecomposition
//! with eigenvalues clamped at a floor, so callers never see NaNs from slightly
//! negative rounding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative floor: smallest eigenvalue must exceed this times the largest.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix, eigenvalues in decreasing order.
///
/// Each eigenvector is normalized so that its first entry with magnitude above
/// `1e-12` is positive; this makes the basis deterministic up to exact ties.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Columns are the eigenvectors.
    pub vectors: DMatrix<f64>,
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn sym_eigen(m: &DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[i];
        let mut v = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vectors.set_column(k, &v);
    }
    SymEigen { values, vectors }
}

impl SymEigen {
    /// Rebuild `V diag(g(λ)) Vᵀ`.
    pub fn map(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut d = self.vectors.clone();
        for j in 0..n {
            let s = g(self.values[j]);
            for i in 0..n {
                d[(i, j)] *= s;
            }
        }
        symmetrize(&(d * self.vectors.transpose()))
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Absolute clamp level used before taking roots or inverses.
fn clamp_level(e: &SymEigen) -> f64 {
    (e.max().abs() * COVARIANCE_FLOOR).max(f64::MIN_POSITIVE)
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    e.map(|l| l.max(0.0).sqrt())
}

pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let floor = clamp_level(&e);
    e.map(|l| 1.0 / l.max(floor).sqrt())
}

pub fn sym_inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let floor = clamp_level(&e);
    e.map(|l| 1.0 / l.max(floor))
}

/// Square root, inverse square root and inverse from one decomposition.
#[derive(Debug, Clone)]
pub struct Roots {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    pub eigen: SymEigen,
}

pub fn roots(m: &DMatrix<f64>) -> Roots {
    let eigen = sym_eigen(m);
    let floor = clamp_level(&eigen);
    Roots {
        sqrt: eigen.map(|l| l.max(0.0).sqrt()),
        inv_sqrt: eigen.map(|l| 1.0 / l.max(floor).sqrt()),
        inv: eigen.map(|l| 1.0 / l.max(floor)),
        eigen,
    }
}

/// Reject a covariance whose smallest eigenvalue falls below `COVARIANCE_FLOOR`
/// times its largest.
pub fn check_floor(m: &DMatrix<f64>) -> Result<SymEigen> {
    let e = sym_eigen(m);
    let (max, min) = (e.max(), e.min());
    if !(max > 0.0) || !(min > COVARIANCE_FLOOR * max) || !min.is_finite() {
        return Err(Error::CovarianceFloorBreach { min, max });
    }
    Ok(e)
}

/// Ridge `ε·Id` with `ε = 1e-10·Tr(A)/n`.
pub fn ridge(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = m.nrows();
    let eps = 1e-10 * m.trace() / n as f64;
    (m + DMatrix::identity(n, n) * eps, eps)
}

/// Operator norm of a symmetric matrix.
pub fn op_norm_sym(m: &DMatrix<f64>) -> f64 {
    let e = sym_eigen(m);
    e.max().abs().max(e.min().abs())
}

/// Operator norm (largest singular value) of a general matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

pub fn hs_norm_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Largest asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Row-major upper triangle (including the diagonal).
pub fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spd(seed: &[f64], n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn eigen_sorted_and_sign_fixed() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = sym_eigen(&m);
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        for j in 0..2 {
            assert!(e.vectors[(0, j)] > 0.0);
        }
    }

    #[test]
    fn floor_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(check_floor(&m), Err(Error::CovarianceFloorBreach { .. })));
        let (r, eps) = ridge(&m);
        assert!(eps > 0.0);
        assert!(check_floor(&r).is_ok());
    }

    proptest! {
        #[test]
        fn roots_are_consistent(vals in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let m = spd(&vals, 3);
            let r = roots(&m);
            let id = DMatrix::<f64>::identity(3, 3);
            prop_assert!((&r.sqrt * &r.sqrt - &m).norm() < 1e-9 * m.norm());
            prop_assert!((&r.inv_sqrt * &m * &r.inv_sqrt - &id).norm() < 1e-8);
            prop_assert!((&r.inv * &m - &id).norm() < 1e-8);
        }
    }
}
