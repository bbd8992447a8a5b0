use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sdmpc_core::defense::detect::{detect, reconstruct_lambda};
use sdmpc_core::defense::em::{
    e_step, m_step, m_step_vectorized, run_em, EmConfig, MixtureParams, Responsibilities,
};
use sdmpc_core::defense::ProbeSet;

fn matrix(c: usize, raw: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(c, c, |i, j| raw[i * c + j])
}

fn well_conditioned(c: usize, raw: &[f64]) -> DMatrix<f64> {
    matrix(c, raw) * 0.3 + DMatrix::identity(c, c) * 2.0
}

fn thetas(c: usize, n: usize, raw: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(c, n, |r, o| {
        raw[(o * c + r) % raw.len()] + 0.01 * (o as f64)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn surrogate_never_decreases(
        c in 1usize..4,
        p_raw in prop::collection::vec(-1.0..1.0f64, 18),
        t_raw in prop::collection::vec(0.0..1.0f64, 64),
        seed in any::<u64>(),
    ) {
        let n = 30;
        let th = thetas(c, n, &t_raw);
        let pa = well_conditioned(c, &p_raw[..9]);
        let pb = well_conditioned(c, &p_raw[9..]);
        let lambdas = DMatrix::from_fn(c, n, |r, o| {
            let p = if o % 3 == 0 { &pb } else { &pa };
            -(p.row(r) * th.column(o))[0] - if o % 3 == 0 { 1.0 } else { 0.0 }
        });
        let probes = ProbeSet::new(th, lambdas, 0).unwrap();
        let cfg = EmConfig { restarts: 2, max_iters: 200, ..Default::default() };
        let out = run_em(&probes, 2, &cfg, seed, None).unwrap();
        for h in &out.history {
            prop_assert!(h.surrogate_after >= h.surrogate_before - 1e-9 * (1.0 + h.surrogate_before.abs()));
        }
    }

    #[test]
    fn vectorized_m_step_agrees(
        c in 1usize..4,
        z_count in 1usize..4,
        t_raw in prop::collection::vec(0.0..1.0f64, 64),
        l_raw in prop::collection::vec(-2.0..2.0f64, 64),
        w_raw in prop::collection::vec(0.05..1.0f64, 64),
    ) {
        let n = 12;
        let probes = ProbeSet::new(
            thetas(c, n, &t_raw),
            DMatrix::from_fn(c, n, |r, o| l_raw[o * c + r]),
            0,
        )
        .unwrap();
        let mut zeta = DMatrix::from_fn(z_count, n, |z, o| w_raw[o * z_count + z]);
        for mut col in zeta.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        let resp = Responsibilities { zeta, underflow: vec![] };
        let direct = m_step(&resp, &probes, &vec![1.0; z_count]).unwrap();
        let vectorized = m_step_vectorized(&resp, &probes);
        for (z, (p, s)) in vectorized.iter().enumerate() {
            prop_assert!((&direct.params.p_mats[z] - p).amax() <= 1e-8 * (1.0 + p.amax()));
            prop_assert!((&direct.params.s_vecs[z] - s).amax() <= 1e-8 * (1.0 + s.amax()));
        }
    }

    #[test]
    fn fit_is_equivariant_under_attack(
        c in 1usize..4,
        p_raw in prop::collection::vec(-1.0..1.0f64, 9),
        t_raw in prop::collection::vec(-1.0..1.0f64, 9),
        s_raw in prop::collection::vec(-1.0..1.0f64, 3),
        th_raw in prop::collection::vec(0.0..1.0f64, 64),
    ) {
        let n = 5 * c;
        let p = well_conditioned(c, &p_raw);
        let s = DVector::from_fn(c, |r, _| s_raw[r]);
        let t = well_conditioned(c, &t_raw);
        let th = thetas(c, n, &th_raw);
        let lambdas = -(&p * &th) - DMatrix::from_fn(c, n, |r, _| s[r]);
        let honest = ProbeSet::new(th, lambdas, 0).unwrap();
        let attacked = honest.transformed(&t);
        let cfg = EmConfig::default();
        let a = run_em(&honest, 1, &cfg, 1, None).unwrap();
        let b = run_em(&attacked, 1, &cfg, 1, None).unwrap();
        let tp = &t * &a.params.p_mats[0];
        prop_assert!((&b.params.p_mats[0] - &tp).amax() <= 1e-8 * (1.0 + tp.amax()));
        prop_assert!((&b.params.s_vecs[0] - &t * &a.params.s_vecs[0]).amax() <= 1e-8);

        let det = detect(b.params.p_mats[0].clone(), b.params.s_vecs[0].clone(), &p, 1e-4).unwrap();
        prop_assert_eq!(det.flag, det.e_val >= 1e-4);
        if let Some(t_inv) = det.t_inv_hat {
            prop_assert!((&t_inv * &t - DMatrix::<f64>::identity(c, c)).amax() <= 1e-7);
            let honest_lambda = DVector::from_fn(c, |r, _| 0.5 + r as f64);
            let rec = reconstruct_lambda(&t_inv, &(&t * &honest_lambda));
            prop_assert!((rec.lambda - honest_lambda).amax() <= 1e-7);
        } else {
            prop_assert!(!det.flag);
        }
    }
}

#[test]
fn e_step_columns_sum_to_one() {
    let params = MixtureParams {
        p_mats: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 3.0],
        s_vecs: vec![DVector::zeros(2), DVector::from_element(2, 1.0)],
        pis: vec![0.3, 0.7],
        sigma_sq: vec![0.5, 2.0],
    };
    let probes = ProbeSet::new(
        DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 0.5, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, 4.0, 2.0, -3.0, 0.5]),
        0,
    )
    .unwrap();
    let zeta = e_step(&params, &probes).unwrap();
    for col in zeta.zeta.column_iter() {
        assert!((col.sum() - 1.0).abs() < 1e-14);
    }
}
