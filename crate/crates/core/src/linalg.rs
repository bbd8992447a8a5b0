//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Above this 2-norm condition estimate a matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `I_n ⊗ m`.
pub fn block_diag_repeat(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    kron(&DMatrix::identity(n, n), m)
}

/// `1_n ⊗ v`.
pub fn repeat_vec(v: &DVector<f64>, n: usize) -> DVector<f64> {
    let len = v.len();
    DVector::from_fn(len * n, |i, _| v[i % len])
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// 2-norm condition number from the singular values; `inf` when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a well-conditioned square matrix.
pub fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Singular { cond });
    }
    m.clone().try_inverse().ok_or(Error::Singular { cond })
}

/// Matrix exponential (scaling and squaring with a Padé approximant).
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}
