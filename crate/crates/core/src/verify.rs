//! Independent reference computations and a self-check suite.
//!
//! The oracles here deliberately avoid the production code paths: the ZOH
//! reference integrates the ODE with RK4, the QP reference enumerates every
//! active set and solves the full KKT system by LU, and the horizon cost is
//! evaluated by forward simulation instead of condensing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coordinator::{
    build_problems, centralized_solve, project_onto_allocation_set, run_closed_loop,
    ClosedLoopSetup, ClosedLoopTrace,
};
use crate::error::Result;
use crate::linalg::min_eigenvalue_sym;
use crate::local::{explicit_dual_piece, solve_local_qp};
use crate::model::{
    build_thermal_model, discretize_zoh, prediction_matrices, ContinuousLti, DiscreteLti,
};
use crate::qp::{self, ActiveSetOptions};
use crate::scenario::{simulate, trace_rows, Mode, ScenarioConfig};

/// `(A_d, B_d)` by integrating `ẋ = A x + B u` over one period with RK4.
pub fn rk4_discretize(m: &ContinuousLti, ts: f64, substeps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = m.a_c.nrows();
    let nu = m.b_c.ncols();
    let h = ts / substeps as f64;
    let integrate = |x0: DVector<f64>, u: DVector<f64>| {
        let drift = |x: &DVector<f64>| &m.a_c * x + &m.b_c * &u;
        let mut x = x0;
        for _ in 0..substeps {
            let k1 = drift(&x);
            let k2 = drift(&(&x + &k1 * (h / 2.0)));
            let k3 = drift(&(&x + &k2 * (h / 2.0)));
            let k4 = drift(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    };
    let mut a = DMatrix::zeros(nx, nx);
    for j in 0..nx {
        let mut e = DVector::zeros(nx);
        e[j] = 1.0;
        a.set_column(j, &integrate(e, DVector::zeros(nu)));
    }
    let mut b = DMatrix::zeros(nx, nu);
    for j in 0..nu {
        let mut e = DVector::zeros(nu);
        e[j] = 1.0;
        b.set_column(j, &integrate(DVector::zeros(nx), e));
    }
    (a, b)
}

/// `Σ_j ‖y[k+j] - w‖²_Q + ‖u[k+j-1]‖²_R` by stepping the model.
pub fn simulated_horizon_cost(
    model: &DiscreteLti,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x0: &DVector<f64>,
    w: &DVector<f64>,
    u_seq: &DVector<f64>,
) -> f64 {
    let nu = model.n_u();
    let mut x = x0.clone();
    let mut cost = 0.0;
    for j in 0..u_seq.len() / nu {
        let u = u_seq.rows(j * nu, nu).into_owned();
        x = model.step(&x, &u);
        let e = model.output(&x) - w;
        cost += e.dot(&(q * &e)) + u.dot(&(r * &u));
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub active: Vec<bool>,
}

/// Minimizer of `1/2 x'Hx + f'x` s.t. `A x ⪯ b` by trying every active set.
///
/// A candidate is accepted when it is primal feasible and its multipliers
/// are nonnegative; for strictly convex problems exactly one optimum exists.
/// Exponential in the number of rows, intended for small instances only.
pub fn kkt_enumerate(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
) -> Option<KktSolution> {
    let n = f.len();
    let m = b.len();
    assert!(m < 24, "enumeration over {m} rows is too large");
    let mut best: Option<(f64, KktSolution)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|r| mask & (1 << r) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(j, n + i)] = a[(r, j)];
                kkt[(n + i, j)] = a[(r, j)];
            }
            rhs[n + i] = b[r];
        }
        let lu = kkt.full_piv_lu();
        if !lu.is_invertible() {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let nu = sol.rows(n, k).into_owned();
        let scale = 1.0 + b.amax() + x.amax();
        if (0..m).any(|r| (a.row(r) * &x)[0] - b[r] > tol * scale) {
            continue;
        }
        if nu.iter().any(|&v| v < -tol * (1.0 + nu.amax())) {
            continue;
        }
        let value = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
        let mut multipliers = DVector::zeros(m);
        let mut active = vec![false; m];
        for (i, &r) in rows.iter().enumerate() {
            multipliers[r] = nu[i];
            active[r] = true;
        }
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((
                value,
                KktSolution {
                    x,
                    multipliers,
                    active,
                },
            ));
        }
    }
    best.map(|(_, s)| s)
}

/// `argmin ‖x - v‖²` over `{x_i ⪰ 0, Σ_i x_i ⪯ cap}` with the generic QP
/// solver on the stacked variables.
pub fn projection_by_qp(v: &[DVector<f64>], cap: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let c = cap.len();
    let m = v.len();
    let n = c * m;
    let mut a = DMatrix::zeros(c + n, n);
    for i in 0..m {
        a.view_mut((0, i * c), (c, c))
            .copy_from(&DMatrix::identity(c, c));
    }
    a.view_mut((c, 0), (n, n))
        .copy_from(&(-DMatrix::<f64>::identity(n, n)));
    let mut b = DVector::zeros(c + n);
    b.rows_mut(0, c).copy_from(cap);
    let mut f = DVector::zeros(n);
    for (i, vi) in v.iter().enumerate() {
        f.rows_mut(i * c, c).copy_from(&(-vi));
    }
    let sol = qp::solve(
        &DMatrix::identity(n, n),
        &f,
        &a,
        &b,
        &DVector::zeros(n),
        &ActiveSetOptions::default(),
    )?;
    Ok((0..m).map(|i| sol.x.rows(i * c, c).into_owned()).collect())
}

/// Per-step relative gap between the negotiated plan cost and the
/// centralized optimum at the same states.
pub fn centralized_gaps(setup: &ClosedLoopSetup, trace: &ClosedLoopTrace) -> Result<Vec<f64>> {
    let preds = setup
        .agents
        .iter()
        .map(|a| prediction_matrices(&a.model, setup.n_p))
        .collect::<Result<Vec<_>>>()?;
    let u_max = setup.u_max_stacked();
    trace
        .steps
        .iter()
        .map(|step| {
            let states: Vec<DVector<f64>> = step.agents.iter().map(|a| a.x.clone()).collect();
            let problems = build_problems(setup, &preds, &states)?;
            let central = centralized_solve(&problems, &u_max)?;
            let distributed: f64 = step.agents.iter().map(|a| a.horizon_cost).sum();
            Ok((distributed - central.objective).abs()
                / central.objective.abs().max(f64::MIN_POSITIVE))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Invariant checks on a shortened copy of the scenario.
pub fn run_suite(cfg: &ScenarioConfig, horizon: usize) -> Result<Vec<Check>> {
    let mut short = cfg.clone();
    short.n_steps = horizon.min(cfg.n_steps).max(1);
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut worst = 0.0f64;
    for room in &short.rooms {
        let cont = build_thermal_model(room)?;
        let disc = discretize_zoh(&cont, short.ts_seconds())?;
        let (a, b) = rk4_discretize(&cont, short.ts_seconds(), 20_000);
        worst = worst.max(max_abs_diff(&disc.a, &a) / (1.0 + a.amax()));
        worst = worst.max(max_abs_diff(&disc.b, &b) / b.amax().max(f64::MIN_POSITIVE));
    }
    checks.push(check(
        "zoh matches rk4",
        worst <= 1e-8,
        format!("max relative deviation {worst:.3e}"),
    ));

    let setup = short.to_setup(false, None)?;
    let preds = setup
        .agents
        .iter()
        .map(|a| prediction_matrices(&a.model, setup.n_p))
        .collect::<Result<Vec<_>>>()?;
    let states: Vec<DVector<f64>> = setup.agents.iter().map(|a| a.x0.clone()).collect();
    let problems = build_problems(&setup, &preds, &states)?;

    let mut worst_cond = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for (spec, prob) in setup.agents.iter().zip(&problems) {
        min_eig = min_eig.min(min_eigenvalue_sym(&prob.h));
        for _ in 0..20 {
            let u = DVector::from_fn(prob.dim(), |_, _| rng.random_range(0.0..setup.u_max[0]));
            let direct = simulated_horizon_cost(
                &spec.model,
                &spec.q,
                &spec.r,
                &spec.x0,
                &spec.reference,
                &u,
            );
            let condensed = prob.objective(&u);
            worst_cond = worst_cond.max((direct - condensed).abs() / direct.abs().max(1.0));
        }
    }
    checks.push(check(
        "condensed cost equals simulated cost",
        worst_cond <= 1e-9,
        format!("max relative deviation {worst_cond:.3e}"),
    ));
    checks.push(check(
        "hessians positive definite",
        min_eig > 0.0,
        format!("smallest eigenvalue {min_eig:.3e}"),
    ));

    let mut worst_qp = 0.0f64;
    let mut worst_pwa = 0.0f64;
    let mut missing = 0;
    for prob in &problems {
        let c = prob.dim();
        for _ in 0..10 {
            let theta = DVector::from_fn(c, |_, _| rng.random_range(0.0..setup.u_max[0]));
            let sol = solve_local_qp(prob, &theta)?;
            let mut a = DMatrix::zeros(2 * c, c);
            a.view_mut((0, 0), (c, c)).copy_from(&prob.gamma_bar);
            a.view_mut((c, 0), (c, c))
                .copy_from(&(-DMatrix::<f64>::identity(c, c)));
            let mut b = DVector::zeros(2 * c);
            b.rows_mut(0, c).copy_from(&theta);
            match kkt_enumerate(&prob.h, &prob.f, &a, &b, 1e-9) {
                Some(reference) => {
                    let dx = (&sol.u_star - &reference.x).amax() / (1.0 + reference.x.amax());
                    let dl = (&sol.lambda - reference.multipliers.rows(0, c)).amax()
                        / (1.0 + reference.multipliers.amax());
                    worst_qp = worst_qp.max(dx).max(dl);
                }
                None => missing += 1,
            }
            let piece = explicit_dual_piece(prob, &sol.active_set)?;
            let dl = (piece.dual_at(&theta) - &sol.lambda).amax() / (1.0 + sol.lambda.amax());
            worst_pwa = worst_pwa.max(dl);
        }
    }
    checks.push(check(
        "local qp matches kkt enumeration",
        worst_qp <= 1e-8 && missing == 0,
        format!("max relative deviation {worst_qp:.3e}, {missing} unmatched"),
    ));
    checks.push(check(
        "prices follow explicit piece",
        worst_pwa <= 1e-8,
        format!("max relative deviation {worst_pwa:.3e}"),
    ));

    let u_max = setup.u_max_stacked();
    let mut worst_proj = 0.0f64;
    for _ in 0..20 {
        let v: Vec<DVector<f64>> = (0..setup.agents.len())
            .map(|_| {
                DVector::from_fn(u_max.len(), |_, _| {
                    rng.random_range(-1.0..2.0) * setup.u_max[0]
                })
            })
            .collect();
        let fast = project_onto_allocation_set(&v, &u_max);
        let reference = projection_by_qp(&v, &u_max)?;
        for (p, r) in fast.thetas.iter().zip(&reference) {
            worst_proj = worst_proj.max((p - r).amax() / (1.0 + setup.u_max[0]));
        }
    }
    checks.push(check(
        "projection matches generic qp",
        worst_proj <= 1e-8,
        format!("max relative deviation {worst_proj:.3e}"),
    ));

    let trace = run_closed_loop(&setup)?;
    let gaps = centralized_gaps(&setup, &trace)?;
    let worst_gap = gaps.iter().copied().fold(0.0, f64::max);
    checks.push(check(
        "negotiation matches centralized optimum",
        worst_gap <= 1e-4,
        format!("max relative gap {worst_gap:.3e} over {} steps", gaps.len()),
    ));

    let budget_excess = trace
        .steps
        .iter()
        .map(|s| s.agents.iter().map(|a| a.u.sum()).sum::<f64>() - short.budget)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(check(
        "budget respected",
        budget_excess <= 1e-9 * short.budget.max(1.0),
        format!("max excess {budget_excess:.3e}"),
    ));

    if short.defense_enabled {
        let (monitored, _) = simulate(&short, Mode::Nominal)?;
        let eps = short.defense.eps_p;
        let worst_e = monitored
            .steps
            .iter()
            .flat_map(|s| {
                s.agents
                    .iter()
                    .filter_map(|a| a.detection.as_ref().map(|d| d.e_val))
            })
            .fold(0.0, f64::max);
        let flagged = monitored
            .steps
            .iter()
            .flat_map(|s| &s.agents)
            .filter(|a| a.detection.as_ref().is_some_and(|d| d.flag))
            .count();
        checks.push(check(
            "no detections without attack",
            flagged == 0,
            format!("max E {worst_e:.3e} against threshold {eps:.1e}"),
        ));
        let (again, _) = simulate(&short, Mode::Nominal)?;
        checks.push(check(
            "repeat run is identical",
            trace_rows(&monitored) == trace_rows(&again),
            String::new(),
        ));
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rk4_scalar_decay() {
        let m = ContinuousLti::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let (a, b) = rk4_discretize(&m, 1.0, 1000);
        assert_relative_eq!(a[(0, 0)], (-1.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(b[(0, 0)], 1.0 - (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn enumeration_finds_bound() {
        let h = DMatrix::from_element(1, 1, 1.0);
        let f = DVector::from_element(1, -2.0);
        let a = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let s = kkt_enumerate(&h, &f, &a, &b, 1e-12).unwrap();
        assert_relative_eq!(s.x[0], 1.0);
        assert_relative_eq!(s.multipliers[0], 1.0);
        assert_eq!(s.active, vec![true, false]);
    }

    #[test]
    fn projection_reference_on_example() {
        let v = vec![DVector::from_element(1, 3.0), DVector::from_element(1, 1.0)];
        let p = projection_by_qp(&v, &DVector::from_element(1, 2.0)).unwrap();
        assert_relative_eq!(p[0][0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(p[1][0], 0.0, epsilon = 1e-12);
    }
}
