mod oracles;

use dlmpc::linalg::{dominant_eig, eig_all};
use dlmpc::models::{Dims, Model, ModelKind, SsmParams};
use dlmpc::plant::{build_default_plant, default_plant_eigenvalues, plant_spectrum};
use dlmpc::rng::substream;
use dlmpc::Matrix;
use oracles::{char_poly, matched_distance, poly_roots, randn, rng, C};
use proptest::prelude::*;

pub const EPS_GRID: [f64; 5] = [0.0, 0.01, 0.05, 0.2, 0.5];

fn ssm(seed: u64, eps: f64) -> SsmParams {
    let mut r = rng(seed);
    let nx = 1 + (seed % 8) as usize;
    let spread = 0.1 + 4.0 * ((seed / 8) % 5) as f64 / 4.0;
    SsmParams {
        a_raw: randn(&mut r, nx, nx, spread),
        m_raw: randn(&mut r, nx, nx, 3.0),
        eps,
        b: randn(&mut r, nx, 1, 1.0),
        e: randn(&mut r, nx, 2, 1.0),
        allow_negative_eps: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ssm_transition_is_a_damped_stochastic_matrix(seed in any::<u64>(), e in 0usize..5) {
        let eps = EPS_GRID[e];
        let p = ssm(seed, eps);
        let a = p.materialize().unwrap();
        prop_assert!(a.min() >= 0.0);
        for s in a.row_sums() {
            prop_assert!(s <= 1.0 + 1e-12 && s >= 1.0 - eps - 1e-12);
        }
        let rho = eig_all(&a).unwrap()[0].norm();
        prop_assert!(rho <= 1.0 + 1e-9 && rho >= 1.0 - eps - 1e-9, "rho {rho} eps {eps}");
        let pf = dominant_eig(&a, true).unwrap();
        prop_assert!((pf - rho).abs() < 1e-9);
    }

    #[test]
    fn zero_input_rollouts_never_grow(seed in any::<u64>(), e in 0usize..5) {
        let p = ssm(seed, EPS_GRID[e]);
        let nx = p.a_raw.rows();
        let model = Model::Ssm(p);
        let mut x: Vec<f64> = (0..nx).map(|i| (i as f64 * 1.7).sin() * 10.0).collect();
        let mut norm = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for _ in 0..1000 {
            x = model.step(&x, &[0.0], &[0.0, 0.0]).unwrap();
            let n = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            prop_assert!(n <= norm * (1.0 + 1e-12));
            norm = n;
        }
    }

    #[test]
    fn eigenvalues_match_characteristic_polynomial_roots(seed in any::<u64>()) {
        let a = randn(&mut rng(seed), 4, 4, 1.0);
        let ours: Vec<C> = eig_all(&a).unwrap().iter().map(|z| C(z.re, z.im)).collect();
        let oracle = poly_roots(&char_poly(&a));
        let d = matched_distance(&ours, &oracle);
        prop_assert!(d < 1e-8, "eigenvalue mismatch {d:e}");
    }
}

#[test]
fn eigenvalues_are_sorted_and_conjugate_closed() {
    let a = randn(&mut rng(11), 6, 6, 1.0);
    let ev = eig_all(&a).unwrap();
    assert!(ev.windows(2).all(|w| w[0].norm() >= w[1].norm() - 1e-12));
    for z in &ev {
        assert!(ev.iter().any(|w| (w.re - z.re).abs() < 1e-9 && (w.im + z.im).abs() < 1e-9));
    }
    let tr: f64 = (0..6).map(|i| a[(i, i)]).sum();
    assert!((ev.iter().map(|z| z.re).sum::<f64>() - tr).abs() < 1e-9);
}

#[test]
fn surrogate_plant_has_the_designed_spectrum() {
    let ev = plant_spectrum(&build_default_plant()).unwrap();
    let designed = default_plant_eigenvalues();
    assert_eq!(designed, vec![0.999, 0.994, 0.983, 0.254]);
    for (z, want) in ev.iter().zip(&designed) {
        assert!(z.im.abs() < 1e-12);
        assert!((z.re - want).abs() < 1e-9, "{} vs {want}", z.re);
    }
}

#[test]
fn rollout_repeats_step() {
    let dims = Dims { nx: 3, nu: 1, nd: 2 };
    for kind in [ModelKind::Lin, ModelKind::Rnn, ModelKind::Gru, ModelKind::Ssm] {
        let m = Model::init(kind, dims, 0.05, &mut substream(5, "rollout")).unwrap();
        let u = Matrix::from_fn(20, 1, |k, _| (k as f64 * 0.3).sin());
        let d = Matrix::from_fn(20, 2, |k, j| (k * (j + 1)) as f64 * 0.01);
        let x0 = [0.5, -0.2, 0.1];
        let traj = m.rollout(&x0, &u, &d).unwrap();
        let mut x = x0.to_vec();
        for k in 0..20 {
            x = m.step(&x, u.row_slice(k), d.row_slice(k)).unwrap();
            let row = traj.row_slice(traj.rows() - 20 + k);
            for (a, b) in x.iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "{kind}");
            }
        }
    }
}
