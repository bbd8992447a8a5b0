use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sdmpc_core::coordinator::project_onto_allocation_set;
use sdmpc_core::local::{explicit_dual_piece, solve_local_qp};
use sdmpc_core::model::AgentProblem;
use sdmpc_core::verify::{kkt_enumerate, projection_by_qp};

fn problem() -> impl Strategy<Value = (AgentProblem, DVector<f64>)> {
    (1usize..5).prop_flat_map(|c| {
        (
            prop::collection::vec(-1.0..1.0f64, c * c),
            prop::collection::vec(-3.0..3.0f64, c),
            prop::collection::vec(0.0..1.0f64, c * c),
            prop::collection::vec(0.0..2.0f64, c),
        )
            .prop_map(move |(l, f, g, theta)| {
                let l = DMatrix::from_vec(c, c, l);
                let h = &l * l.transpose() + DMatrix::identity(c, c) * 0.5;
                let h = (&h + h.transpose()) * 0.5;
                let gamma = DMatrix::from_vec(c, c, g) + DMatrix::identity(c, c);
                let prob = AgentProblem::new(h, DVector::from_vec(f), gamma).unwrap();
                (prob, DVector::from_vec(theta))
            })
    })
}

fn stacked(prob: &AgentProblem, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let c = prob.dim();
    let mut a = DMatrix::zeros(2 * c, c);
    a.view_mut((0, 0), (c, c)).copy_from(&prob.gamma_bar);
    a.view_mut((c, 0), (c, c))
        .copy_from(&(-DMatrix::<f64>::identity(c, c)));
    let mut b = DVector::zeros(2 * c);
    b.rows_mut(0, c).copy_from(theta);
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn local_qp_matches_enumeration((prob, theta) in problem()) {
        let sol = solve_local_qp(&prob, &theta).unwrap();
        let (a, b) = stacked(&prob, &theta);
        let oracle = kkt_enumerate(&prob.h, &prob.f, &a, &b, 1e-10).unwrap();
        prop_assert!((&sol.u_star - &oracle.x).amax() <= 1e-8);
        let c = prob.dim();
        let oracle_lambda = oracle.multipliers.rows(0, c).into_owned();
        prop_assert!((&sol.lambda - oracle_lambda).amax() <= 1e-7 * (1.0 + sol.lambda.amax()));
    }

    #[test]
    fn explicit_piece_reproduces_prices((prob, theta) in problem()) {
        let sol = solve_local_qp(&prob, &theta).unwrap();
        let piece = explicit_dual_piece(&prob, &sol.active_set).unwrap();
        let predicted = piece.dual_at(&theta);
        for r in 0..prob.dim() {
            if sol.active_set.coupling[r] {
                prop_assert!((predicted[r] - sol.lambda[r]).abs() <= 1e-8 * (1.0 + sol.lambda.amax()));
            } else {
                prop_assert_eq!(sol.lambda[r], 0.0);
            }
        }
    }

    #[test]
    fn projection_is_optimal(
        m in 1usize..5,
        c in 1usize..4,
        raw in prop::collection::vec(-3.0..3.0f64, 16),
        cap in prop::collection::vec(0.0..4.0f64, 4),
        probe in prop::collection::vec(0.0..1.0f64, 16),
    ) {
        let v: Vec<DVector<f64>> = (0..m).map(|i| DVector::from_fn(c, |r, _| raw[i * 4 + r])).collect();
        let cap = DVector::from_fn(c, |r, _| cap[r]);
        let p = project_onto_allocation_set(&v, &cap);
        prop_assert!(p.contains(1e-12));
        let oracle = projection_by_qp(&v, &cap).unwrap();
        for (a, b) in p.thetas.iter().zip(&oracle) {
            prop_assert!((a - b).amax() <= 1e-10);
        }
        // variational inequality against a feasible point built from `probe`
        let mut z: Vec<DVector<f64>> = (0..m).map(|i| DVector::from_fn(c, |r, _| probe[i * 4 + r])).collect();
        for r in 0..c {
            let total: f64 = z.iter().map(|zi| zi[r]).sum();
            if total > cap[r] {
                for zi in &mut z {
                    zi[r] *= cap[r] / total;
                }
            }
        }
        let inner: f64 = (0..m).map(|i| (&v[i] - &p.thetas[i]).dot(&(&z[i] - &p.thetas[i]))).sum();
        prop_assert!(inner <= 1e-10);
    }
}
