//! Room thermal models, zero-order-hold discretization and MPC condensing.
//!
//! The predictions cover outputs `y[k+1..=k+Np]` driven by inputs
//! `u[k..k+Np-1]`. Condensing turns the finite-horizon tracking cost
//!
//! ```text
//! sum_j ||y[k+j] - w||^2_Q + ||u[k+j-1]||^2_R
//! ```
//!
//! into `U' H U + 2 f' U + offset`, i.e. twice the QP objective
//! `1/2 U' H U + f' U` plus a constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag_repeat, expm, is_symmetric, min_eigenvalue_sym, repeat_vec};

/// Lumped 3R-2C room parameters, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalParams {
    /// Heat capacity of the inside air (J/K).
    pub c_air: f64,
    /// Heat capacity of the external walls (J/K).
    pub c_walls: f64,
    /// Resistance between inside and outside air, windows (K/W).
    pub r_oa_ia: f64,
    /// Resistance between inside air and inside walls (K/W).
    pub r_iw_ia: f64,
    /// Resistance between outside walls and outside air (K/W).
    pub r_ow_oa: f64,
}

impl ThermalParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_air", self.c_air),
            ("c_walls", self.c_walls),
            ("r_oa_ia", self.r_oa_ia),
            ("r_iw_ia", self.r_iw_ia),
            ("r_ow_oa", self.r_ow_oa),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::invalid(name, format!("must be > 0, got {value}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLti {
    pub a_c: DMatrix<f64>,
    pub b_c: DMatrix<f64>,
    pub c_c: DMatrix<f64>,
}

impl ContinuousLti {
    pub fn new(a_c: DMatrix<f64>, b_c: DMatrix<f64>, c_c: DMatrix<f64>) -> Result<Self> {
        check_dims(&a_c, &b_c, &c_c)?;
        Ok(Self { a_c, b_c, c_c })
    }

    pub fn n_x(&self) -> usize {
        self.a_c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Sampling time in the time unit of the continuous model.
    pub ts: f64,
}

impl DiscreteLti {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, ts: f64) -> Result<Self> {
        check_dims(&a, &b, &c)?;
        if !(ts > 0.0) {
            return Err(Error::invalid("ts", format!("must be > 0, got {ts}")));
        }
        Ok(Self { a, b, c, ts })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            context: "state matrix columns",
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            context: "input matrix rows",
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    if c.ncols() != a.nrows() {
        return Err(Error::DimensionMismatch {
            context: "output matrix columns",
            expected: a.nrows(),
            actual: c.ncols(),
        });
    }
    Ok(())
}

/// Two-state room model.
///
/// The second diagonal entry uses `r_ow_oa` for the outside resistance, and
/// the first state is the measured one (`C = [1 0]`). The heating channel
/// enters the first state with gain `10 / c_walls`.
pub fn build_thermal_model(p: &ThermalParams) -> Result<ContinuousLti> {
    p.validate()?;
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[
            -1.0 / (p.c_walls * p.r_oa_ia) - 1.0 / (p.c_walls * p.r_iw_ia),
            1.0 / (p.c_walls * p.r_iw_ia),
            1.0 / (p.c_air * p.r_iw_ia),
            -1.0 / (p.c_air * p.r_ow_oa) - 1.0 / (p.c_air * p.r_iw_ia),
        ],
    );
    let b = DMatrix::from_column_slice(2, 1, &[10.0 / p.c_walls, 0.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    ContinuousLti::new(a, b, c)
}

/// Zero-order-hold discretization through the exponential of the augmented
/// matrix `[[A, B], [0, 0]] * ts`.
pub fn discretize_zoh(m: &ContinuousLti, ts: f64) -> Result<DiscreteLti> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::invalid("ts", format!("must be > 0, got {ts}")));
    }
    let nx = m.n_x();
    let nu = m.b_c.ncols();
    let mut aug = DMatrix::zeros(nx + nu, nx + nu);
    aug.view_mut((0, 0), (nx, nx)).copy_from(&(&m.a_c * ts));
    aug.view_mut((0, nx), (nx, nu)).copy_from(&(&m.b_c * ts));
    let e = expm(&aug);
    let a = e.view((0, 0), (nx, nx)).into_owned();
    let b = e.view((0, nx), (nx, nu)).into_owned();
    DiscreteLti::new(a, b, m.c_c.clone(), ts)
}

/// Stacked free and forced response maps over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOperator {
    /// `N_p n_y x n_x`; row block `j` is `C A^(j+1)`.
    pub m_pred: DMatrix<f64>,
    /// `N_p n_y x N_p n_u`, block lower triangular.
    pub d_pred: DMatrix<f64>,
    pub n_p: usize,
}

pub fn prediction_matrices(m: &DiscreteLti, n_p: usize) -> Result<PredictionOperator> {
    if n_p == 0 {
        return Err(Error::invalid("n_p", "horizon must be at least 1"));
    }
    let (nx, nu, ny) = (m.n_x(), m.n_u(), m.n_y());
    // powers[j] = A^j for j = 0..=n_p
    let mut powers = Vec::with_capacity(n_p + 1);
    powers.push(DMatrix::<f64>::identity(nx, nx));
    for j in 1..=n_p {
        let next = &m.a * &powers[j - 1];
        powers.push(next);
    }
    let mut m_pred = DMatrix::zeros(n_p * ny, nx);
    let mut d_pred = DMatrix::zeros(n_p * ny, n_p * nu);
    for j in 0..n_p {
        m_pred
            .view_mut((j * ny, 0), (ny, nx))
            .copy_from(&(&m.c * &powers[j + 1]));
        for l in 0..=j {
            let block = &m.c * &powers[j - l] * &m.b;
            d_pred
                .view_mut((j * ny, l * nu), (ny, nu))
                .copy_from(&block);
        }
    }
    Ok(PredictionOperator {
        m_pred,
        d_pred,
        n_p,
    })
}

/// Condensed tracking QP: `1/2 U'HU + f'U`, with `offset` the constant part
/// of the original cost (`||M x0 - W||^2_Qbar`).
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub offset: f64,
}

pub fn condense_qp(
    pred: &PredictionOperator,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x0: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<CondensedQp> {
    let n_p = pred.n_p;
    let ny = pred.m_pred.nrows() / n_p;
    let nu = pred.d_pred.ncols() / n_p;
    if q.nrows() != ny || !q.is_square() {
        return Err(Error::DimensionMismatch {
            context: "output weight Q",
            expected: ny,
            actual: q.nrows(),
        });
    }
    if r.nrows() != nu || !r.is_square() {
        return Err(Error::DimensionMismatch {
            context: "input weight R",
            expected: nu,
            actual: r.nrows(),
        });
    }
    if w.len() != ny {
        return Err(Error::DimensionMismatch {
            context: "reference",
            expected: ny,
            actual: w.len(),
        });
    }
    if x0.len() != pred.m_pred.ncols() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: pred.m_pred.ncols(),
            actual: x0.len(),
        });
    }
    if !is_symmetric(q, 1e-12) || min_eigenvalue_sym(q) < -1e-12 {
        return Err(Error::invalid(
            "q_weight",
            "must be symmetric positive semidefinite",
        ));
    }
    if !is_symmetric(r, 1e-12) || r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("r_weight"));
    }
    let q_bar = block_diag_repeat(q, n_p);
    let r_bar = block_diag_repeat(r, n_p);
    let dq = pred.d_pred.transpose() * &q_bar;
    let mut h = &dq * &pred.d_pred + r_bar;
    // exact symmetry; roundoff in the product can leave ulp-level skew
    h = (&h + h.transpose()) * 0.5;
    let free = &pred.m_pred * x0 - repeat_vec(w, n_p);
    let f = &dq * &free;
    let offset = free.dot(&(&q_bar * &free));
    Ok(CondensedQp { h, f, offset })
}

/// One agent's local QP data at a given time step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    /// `I_Np ⊗ Γ`, nonnegative entries.
    pub gamma_bar: DMatrix<f64>,
    /// Constant term of the stage-wise cost, see [`CondensedQp`].
    pub offset: f64,
}

impl AgentProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>, gamma_bar: DMatrix<f64>) -> Result<Self> {
        Self::with_offset(h, f, gamma_bar, 0.0)
    }

    pub fn with_offset(
        h: DMatrix<f64>,
        f: DVector<f64>,
        gamma_bar: DMatrix<f64>,
        offset: f64,
    ) -> Result<Self> {
        let c = f.len();
        if h.nrows() != c || h.ncols() != c {
            return Err(Error::DimensionMismatch {
                context: "Hessian",
                expected: c,
                actual: h.nrows(),
            });
        }
        if gamma_bar.nrows() != c || gamma_bar.ncols() != c {
            return Err(Error::DimensionMismatch {
                context: "coupling matrix",
                expected: c,
                actual: gamma_bar.nrows(),
            });
        }
        if !is_symmetric(&h, 1e-10) || h.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("h"));
        }
        if gamma_bar.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::invalid(
                "gamma",
                "entries must be finite and nonnegative",
            ));
        }
        Ok(Self {
            h,
            f,
            gamma_bar,
            offset,
        })
    }

    /// Builds the tracking problem for state `x0` and constant reference `w`.
    pub fn tracking(
        pred: &PredictionOperator,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        gamma: &DMatrix<f64>,
        x0: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<Self> {
        let qp = condense_qp(pred, q, r, x0, w)?;
        let gamma_bar = block_diag_repeat(gamma, pred.n_p);
        Self::with_offset(qp.h, qp.f, gamma_bar, qp.offset)
    }

    /// Number of decision variables `c = N_p n_u`.
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    /// `1/2 U'HU + f'U`.
    pub fn qp_value(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }

    /// Stage-wise horizon cost `J_i[k]` for input sequence `u`.
    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        2.0 * self.qp_value(u) + self.offset
    }
}
