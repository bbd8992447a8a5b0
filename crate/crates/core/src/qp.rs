//! Primal active-set method for strictly convex dense QPs
//!
//! ```text
//! minimize 1/2 x'Hx + f'x  subject to  A x <= b
//! ```
//!
//! started from a feasible point. Each working-set change refactors the
//! reduced system `A_W H^-1 A_W'` with a Cholesky decomposition. Exact
//! active sets are reported, which is what the zone bookkeeping downstream
//! relies on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSetOptions {
    /// Constraint-violation and multiplier tolerance.
    pub tol: f64,
    /// Maximum number of working-set changes.
    pub max_changes: usize,
}

impl Default for ActiveSetOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_changes: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row; exactly zero outside the working set.
    pub multipliers: DVector<f64>,
    /// Final working set, by constraint row.
    pub working: Vec<bool>,
    pub changes: usize,
}

/// Equality-constrained subproblem on the rows in `working`:
/// returns the minimizer and the multipliers of those rows (in order).
fn solve_eqp(
    chol: &Cholesky<f64, Dyn>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    working: &[usize],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let hinv_f = chol.solve(f);
    if working.is_empty() {
        return Ok((-hinv_f, DVector::zeros(0)));
    }
    let n = f.len();
    let aw = DMatrix::from_fn(working.len(), n, |r, c| a[(working[r], c)]);
    let bw = DVector::from_fn(working.len(), |r, _| b[working[r]]);
    let hinv_awt = chol.solve(&aw.transpose());
    let schur = &aw * &hinv_awt;
    let schur = (&schur + schur.transpose()) * 0.5;
    let schur_chol = schur
        .cholesky()
        .ok_or_else(|| Error::DegeneratePiece(format!("working rows {working:?}")))?;
    let nu = -schur_chol.solve(&(bw + &aw * &hinv_f));
    let x = -(hinv_f + &hinv_awt * &nu);
    Ok((x, nu))
}

/// Solves the QP from the feasible start `x0`.
///
/// Ties are broken deterministically: the blocking constraint with the
/// smallest step ratio enters (lowest row index on exact ties) and the most
/// negative multiplier leaves (lowest index on exact ties).
pub fn solve(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &ActiveSetOptions,
) -> Result<QpSolution> {
    let n = f.len();
    let m = b.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "QP Hessian",
            expected: n,
            actual: h.nrows(),
        });
    }
    if a.nrows() != m || a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "QP constraint matrix",
            expected: m,
            actual: a.nrows(),
        });
    }
    let chol = h
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("h"))?;

    let slack0 = b - a * x0;
    if let Some(row) = (0..m).find(|&r| slack0[r] < -opts.tol * (1.0 + b[r].abs())) {
        return Err(Error::Infeasible {
            row,
            value: slack0[row],
        });
    }

    let mut x = x0.clone();
    let mut working: Vec<usize> = Vec::new();
    let mut changes = 0usize;

    loop {
        let (x_eq, nu) = solve_eqp(&chol, f, a, b, &working)?;
        let p = &x_eq - &x;
        let step_scale = 1.0 + x.amax().max(x_eq.amax());
        if p.amax() <= opts.tol * step_scale {
            x = x_eq;
            let mut leave: Option<(usize, f64)> = None;
            for (pos, &value) in nu.iter().enumerate() {
                if value < -opts.tol && leave.is_none_or(|(_, v)| value < v) {
                    leave = Some((pos, value));
                }
            }
            match leave {
                None => {
                    let mut multipliers = DVector::zeros(m);
                    let mut flags = vec![false; m];
                    for (pos, &row) in working.iter().enumerate() {
                        multipliers[row] = nu[pos];
                        flags[row] = true;
                    }
                    return Ok(QpSolution {
                        x,
                        multipliers,
                        working: flags,
                        changes,
                    });
                }
                Some((pos, _)) => {
                    working.remove(pos);
                }
            }
        } else {
            let p_norm = p.norm();
            let mut alpha = 1.0;
            let mut entering = None;
            for row in 0..m {
                if working.contains(&row) {
                    continue;
                }
                let ai = a.row(row);
                let ap = (ai * &p)[0];
                if ap <= f64::EPSILON * ai.norm() * p_norm {
                    continue;
                }
                let slack = (b[row] - (ai * &x)[0]).max(0.0);
                let ratio = slack / ap;
                if ratio < alpha {
                    alpha = ratio;
                    entering = Some(row);
                }
            }
            x += alpha * &p;
            match entering {
                Some(row) => {
                    let pos = working.partition_point(|&r| r < row);
                    working.insert(pos, row);
                }
                None => continue,
            }
        }
        changes += 1;
        if changes > opts.max_changes {
            return Err(Error::IterationLimit(opts.max_changes));
        }
    }
}
