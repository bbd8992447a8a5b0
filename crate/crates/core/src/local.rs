//! Agent side of the negotiation: the allocation-constrained local QP, its
//! dual prices, the explicit piecewise-affine dual pieces, and the
//! false-data-injection wrapper on outgoing prices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, checked_inverse};
use crate::model::AgentProblem;
use crate::qp::{self, ActiveSetOptions};

/// Active constraints of the local QP, split into the coupling rows
/// `Γ̄U ⪯ θ` and the nonnegativity rows `U ⪰ 0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActiveSet {
    pub coupling: Vec<bool>,
    pub nonneg: Vec<bool>,
}

impl ActiveSet {
    pub fn all_coupling(c: usize) -> Self {
        Self {
            coupling: vec![true; c],
            nonneg: vec![false; c],
        }
    }

    pub fn none(c: usize) -> Self {
        Self {
            coupling: vec![false; c],
            nonneg: vec![false; c],
        }
    }

    /// The 1-zone: every coupling row active and no nonnegativity row.
    pub fn is_all_coupling(&self) -> bool {
        self.coupling.iter().all(|&a| a) && !self.nonneg.iter().any(|&a| a)
    }

    fn rows(&self) -> Vec<usize> {
        let c = self.coupling.len();
        let coupling = self
            .coupling
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(r, _)| r);
        let nonneg = self
            .nonneg
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(move |(r, _)| c + r);
        coupling.chain(nonneg).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolution {
    pub u_star: DVector<f64>,
    /// Prices of the coupling rows.
    pub lambda: DVector<f64>,
    /// Multipliers of the nonnegativity rows.
    pub mu: DVector<f64>,
    pub active_set: ActiveSet,
}

fn stacked_constraints(prob: &AgentProblem, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let c = prob.dim();
    let mut a = DMatrix::zeros(2 * c, c);
    a.view_mut((0, 0), (c, c)).copy_from(&prob.gamma_bar);
    a.view_mut((c, 0), (c, c))
        .copy_from(&(-DMatrix::<f64>::identity(c, c)));
    let mut b = DVector::zeros(2 * c);
    b.rows_mut(0, c).copy_from(theta);
    (a, b)
}

/// Solves `min 1/2 U'HU + f'U  s.t.  Γ̄U ⪯ θ, U ⪰ 0` and returns the
/// primal minimizer with the coupling prices `λ`.
pub fn solve_local_qp(prob: &AgentProblem, theta: &DVector<f64>) -> Result<LocalSolution> {
    solve_local_qp_with(prob, theta, &ActiveSetOptions::default())
}

pub fn solve_local_qp_with(
    prob: &AgentProblem,
    theta: &DVector<f64>,
    opts: &ActiveSetOptions,
) -> Result<LocalSolution> {
    let c = prob.dim();
    if theta.len() != c {
        return Err(Error::DimensionMismatch {
            context: "allocation",
            expected: c,
            actual: theta.len(),
        });
    }
    if !all_finite(theta) {
        return Err(Error::invalid("theta", "allocation has non-finite entries"));
    }
    // Γ̄ ⪰ 0 entrywise, so Γ̄U ⪰ 0 for every feasible U
    if let Some(row) = (0..c).find(|&r| theta[r] < 0.0) {
        return Err(Error::Infeasible {
            row,
            value: theta[row],
        });
    }
    let (a, b) = stacked_constraints(prob, theta);
    let sol = qp::solve(&prob.h, &prob.f, &a, &b, &DVector::zeros(c), opts)?;
    Ok(LocalSolution {
        u_star: sol.x,
        lambda: sol.multipliers.rows(0, c).into_owned(),
        mu: sol.multipliers.rows(c, c).into_owned(),
        active_set: ActiveSet {
            coupling: sol.working[..c].to_vec(),
            nonneg: sol.working[c..].to_vec(),
        },
    })
}

/// Affine dual map `λ(θ) = -P θ - s` valid on one zone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitPiece {
    pub p_mat: DMatrix<f64>,
    pub s_vec: DVector<f64>,
    pub active_set: ActiveSet,
}

impl ExplicitPiece {
    pub fn dual_at(&self, theta: &DVector<f64>) -> DVector<f64> {
        -(&self.p_mat * theta) - &self.s_vec
    }
}

/// Closed-form dual piece for the zone with the given active set.
///
/// With the active rows `A_W`, right-hand side `J θ` (zero for the
/// nonnegativity rows) and `S = A_W H⁻¹ A_Wᵀ`, the multipliers are
/// `ν = -S⁻¹ J θ - S⁻¹ A_W H⁻¹ f`; the coupling entries of `ν` give `λ`.
pub fn explicit_dual_piece(prob: &AgentProblem, active: &ActiveSet) -> Result<ExplicitPiece> {
    let c = prob.dim();
    if active.coupling.len() != c || active.nonneg.len() != c {
        return Err(Error::DimensionMismatch {
            context: "active set",
            expected: c,
            actual: active.coupling.len(),
        });
    }
    let rows = active.rows();
    let mut p_mat = DMatrix::zeros(c, c);
    let mut s_vec = DVector::zeros(c);
    if rows.is_empty() {
        return Ok(ExplicitPiece {
            p_mat,
            s_vec,
            active_set: active.clone(),
        });
    }
    let chol = prob
        .h
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("h"))?;
    let (a_full, _) = stacked_constraints(prob, &DVector::zeros(c));
    let aw = DMatrix::from_fn(rows.len(), c, |r, j| a_full[(rows[r], j)]);
    let schur = &aw * chol.solve(&aw.transpose());
    let schur = (&schur + schur.transpose()) * 0.5;
    let schur_inv = checked_inverse(&schur)
        .map_err(|_| Error::DegeneratePiece(format!("active rows {rows:?}")))?;
    let offset = &schur_inv * (&aw * chol.solve(&prob.f));
    for (i, &ri) in rows.iter().enumerate() {
        if ri >= c {
            continue;
        }
        s_vec[ri] = offset[i];
        for (j, &rj) in rows.iter().enumerate() {
            if rj < c {
                p_mat[(ri, rj)] = schur_inv[(i, j)];
            }
        }
    }
    Ok(ExplicitPiece {
        p_mat,
        s_vec,
        active_set: active.clone(),
    })
}

/// `-H⁻¹ f`, the minimizer without any constraint.
pub fn unconstrained_solution(prob: &AgentProblem) -> DVector<f64> {
    let chol = prob
        .h
        .clone()
        .cholesky()
        .expect("AgentProblem guarantees a positive definite Hessian");
    -chol.solve(&prob.f)
}

/// Linear falsification `λ̃ = T λ` applied from closed-loop step `active_from`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub t_mat: DMatrix<f64>,
    pub active_from: usize,
}

impl AttackSpec {
    pub fn new(t_mat: DMatrix<f64>, active_from: usize) -> Result<Self> {
        if !t_mat.is_square() {
            return Err(Error::invalid("attack.t_mat", "must be square"));
        }
        // validates invertibility
        checked_inverse(&t_mat).map_err(|e| Error::invalid("attack.t_mat", e.to_string()))?;
        Ok(Self { t_mat, active_from })
    }

    pub fn is_active(&self, k: usize) -> bool {
        k >= self.active_from
    }

    pub fn apply(&self, lambda: &DVector<f64>, k: usize) -> DVector<f64> {
        if self.is_active(k) {
            &self.t_mat * lambda
        } else {
            lambda.clone()
        }
    }
}

/// A local controller as seen by the coordinator: it answers allocations
/// with (possibly falsified) prices.
#[derive(Debug, Clone)]
pub struct LocalAgent {
    pub problem: AgentProblem,
    pub attack: Option<AttackSpec>,
}

/// What an agent computed and what it sent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentResponse {
    pub solution: LocalSolution,
    pub sent: DVector<f64>,
}

impl LocalAgent {
    pub fn truthful(problem: AgentProblem) -> Self {
        Self {
            problem,
            attack: None,
        }
    }

    pub fn respond(&self, theta: &DVector<f64>, k: usize) -> Result<AgentResponse> {
        let solution = solve_local_qp(&self.problem, theta)?;
        let sent = match &self.attack {
            Some(attack) => attack.apply(&solution.lambda, k),
            None => solution.lambda.clone(),
        };
        Ok(AgentResponse { solution, sent })
    }
}
