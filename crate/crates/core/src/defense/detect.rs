use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::checked_inverse;

use super::em::Responsibilities;

/// Component owning the zero probe: `argmax_z ζ_z,zero`, lowest index on ties.
pub fn match_one_zone(zeta: &Responsibilities, zero_index: usize) -> usize {
    let column = zeta.zeta.column(zero_index);
    let mut best = 0;
    for z in 1..column.len() {
        if column[z] > column[best] {
            best = z;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// `‖P̂¹ - P̄¹‖_F`.
    pub e_val: f64,
    pub flag: bool,
    /// `P̄¹ (P̂¹)⁻¹`, present when flagged and `P̂¹` is well conditioned.
    pub t_inv_hat: Option<DMatrix<f64>>,
    pub p1_hat: DMatrix<f64>,
    pub s1_hat: DVector<f64>,
}

/// `T̂⁻¹ = P̄¹ (P̂¹)⁻¹`.
pub fn estimate_t_inv(p1_hat: &DMatrix<f64>, p1_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p1_hat.shape() != p1_bar.shape() {
        return Err(Error::DimensionMismatch {
            context: "estimated slope",
            expected: p1_bar.nrows(),
            actual: p1_hat.nrows(),
        });
    }
    Ok(p1_bar * checked_inverse(p1_hat)?)
}

pub fn detect(
    p1_hat: DMatrix<f64>,
    s1_hat: DVector<f64>,
    p1_bar: &DMatrix<f64>,
    eps_p: f64,
) -> Result<DetectionResult> {
    if p1_hat.shape() != p1_bar.shape() {
        return Err(Error::DimensionMismatch {
            context: "estimated slope",
            expected: p1_bar.nrows(),
            actual: p1_hat.nrows(),
        });
    }
    let e_val = (&p1_hat - p1_bar).norm();
    let flag = e_val >= eps_p;
    let t_inv_hat = if flag {
        match estimate_t_inv(&p1_hat, p1_bar) {
            Ok(t) => Some(t),
            Err(Error::Singular { cond }) => {
                log::warn!("estimated slope is ill conditioned (cond {cond:e}); no inverse");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(DetectionResult {
        e_val,
        flag,
        t_inv_hat,
        p1_hat,
        s1_hat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub lambda: DVector<f64>,
    /// Entries raised to zero.
    pub clipped: usize,
    /// Some entry was below `-1e-9` before clipping.
    pub inconsistent: bool,
}

const NEGATIVE_PRICE_TOL: f64 = 1e-9;

/// `max(T̂⁻¹ λ̃, 0)` entrywise.
pub fn reconstruct_lambda(t_inv_hat: &DMatrix<f64>, received: &DVector<f64>) -> Reconstruction {
    let mut lambda = t_inv_hat * received;
    let mut clipped = 0;
    let mut inconsistent = false;
    for v in lambda.iter_mut() {
        if *v < 0.0 {
            inconsistent |= *v < -NEGATIVE_PRICE_TOL;
            *v = 0.0;
            clipped += 1;
        }
    }
    Reconstruction {
        lambda,
        clipped,
        inconsistent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn matching_prefers_zero_probe_owner() {
        let zeta = Responsibilities {
            zeta: DMatrix::from_row_slice(2, 3, &[0.2, 0.9, 0.5, 0.8, 0.1, 0.5]),
            underflow: vec![],
        };
        assert_eq!(match_one_zone(&zeta, 0), 1);
        assert_eq!(match_one_zone(&zeta, 1), 0);
        assert_eq!(match_one_zone(&zeta, 2), 0);
    }

    #[test]
    fn identical_slopes_not_flagged() {
        let p = diag(&[1.0, 2.0]);
        let r = detect(p.clone(), DVector::zeros(2), &p, 1e-4).unwrap();
        assert_eq!(r.e_val, 0.0);
        assert!(!r.flag);
        assert!(r.t_inv_hat.is_none());
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let r = detect(p.clone() * 1.5, DVector::zeros(1), &p, 0.5).unwrap();
        assert!(r.flag);
        let r = detect(p.clone() * 1.25, DVector::zeros(1), &p, 0.5).unwrap();
        assert!(!r.flag);
    }

    #[test]
    fn inverse_recovers_diagonal_attack() {
        let t = diag(&[2.0, 3.0]);
        let p_bar = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = detect(&t * &p_bar, DVector::zeros(2), &p_bar, 1e-4).unwrap();
        assert!(r.flag);
        let t_inv = r.t_inv_hat.unwrap();
        assert_relative_eq!(t_inv, diag(&[0.5, 1.0 / 3.0]), epsilon = 1e-14);
    }

    #[test]
    fn singular_estimate_has_no_inverse() {
        let r = detect(
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            &DMatrix::identity(2, 2),
            1e-4,
        )
        .unwrap();
        assert!(r.flag);
        assert!(r.t_inv_hat.is_none());
    }

    #[test]
    fn reconstruction_clips_negative_entries() {
        let r = reconstruct_lambda(
            &DMatrix::identity(3, 3),
            &DVector::from_vec(vec![1.0, -1e-12, -0.5]),
        );
        assert_eq!(r.lambda, DVector::from_vec(vec![1.0, 0.0, 0.0]));
        assert_eq!(r.clipped, 2);
        assert!(r.inconsistent);
        let r = reconstruct_lambda(&DMatrix::identity(1, 1), &DVector::from_vec(vec![-1e-12]));
        assert!(!r.inconsistent);
    }
}
