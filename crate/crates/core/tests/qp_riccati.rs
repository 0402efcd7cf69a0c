mod oracles;

use dlmpc::baselines::{
    dare_solve, lqr, qp_solve, qp_solve_with, riccati_residual, LqiController, QpProblem, QpSettings, QpStatus,
    ServoWeights, QP_MAX_ITER, QP_TOL,
};
use dlmpc::linalg::spectral_radius;
use dlmpc::plant::build_default_plant;
use dlmpc::{Error, Matrix};
use oracles::{active_set_qp, brute_force_qp, random_qp, randn, rng, IneqQp};
use proptest::prelude::*;
use rand::Rng;

fn to_problem(q: &IneqQp) -> QpProblem {
    QpProblem::inequality(q.h.clone(), q.f.clone(), q.g.clone(), q.hv.clone()).unwrap()
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn small_qps_match_exhaustive_enumeration(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=10) {
        let (q, z0) = random_qp(&mut rng(seed), n, m);
        let exact = brute_force_qp(&q);
        let sol = qp_solve(&to_problem(&q), QP_TOL, QP_MAX_ITER).unwrap();
        prop_assert!(rel_gap(q.objective(&sol.z), q.objective(&exact)) < 1e-6);
        prop_assert!(q.max_violation(&sol.z) < 1e-6);
        // the active-set oracle itself agrees with enumeration
        let asq = active_set_qp(&q, &z0);
        prop_assert!(rel_gap(q.objective(&asq), q.objective(&exact)) < 1e-9);
    }
}

#[test]
fn random_qps_match_active_set_oracle_with_small_kkt_residuals() {
    let mut r = rng(2024);
    for case in 0..100 {
        let n = r.random_range(2..=20);
        let m = r.random_range(1..=40);
        let (q, z0) = random_qp(&mut r, n, m);
        let p = to_problem(&q);
        let sol = qp_solve(&p, QP_TOL, QP_MAX_ITER).unwrap();
        let oracle = active_set_qp(&q, &z0);
        let gap = rel_gap(q.objective(&sol.z), q.objective(&oracle));
        assert!(gap < 1e-6, "case {case} (n {n}, m {m}): relative objective gap {gap:e}");
        assert!(p.primal_residual(&sol.z) < 1e-6, "case {case}");
        assert!(p.dual_residual(&sol.z, &sol.y) < 1e-6, "case {case}");
        assert!(p.complementarity(&sol.z, &sol.y) < 1e-6, "case {case}");
        assert_eq!(sol.status, QpStatus::Solved);
    }
}

#[test]
fn two_sided_rows_match_stacked_one_sided_oracle() {
    let mut r = rng(77);
    for _ in 0..30 {
        let n = r.random_range(2..=8);
        let m = r.random_range(1..=8);
        let (q, z0) = random_qp(&mut r, n, m);
        let lower: Vec<f64> = q.g.matvec(&z0).iter().map(|v| v - r.random_range(0.05..1.0)).collect();
        let p = QpProblem { h: q.h.clone(), f: q.f.clone(), a: q.g.clone(), lower: lower.clone(), upper: q.hv.clone() };
        let stacked = IneqQp {
            g: Matrix::try_concat_rows(&[&q.g, &q.g.scale(-1.0)]).unwrap(),
            hv: q.hv.iter().cloned().chain(lower.iter().map(|v| -v)).collect(),
            ..q.clone()
        };
        let sol = qp_solve(&p, QP_TOL, QP_MAX_ITER).unwrap();
        let oracle = active_set_qp(&stacked, &z0);
        assert!(rel_gap(p.objective(&sol.z), stacked.objective(&oracle)) < 1e-6);
        assert!(p.complementarity(&sol.z, &sol.y) < 1e-6);
    }
}

#[test]
fn textbook_instances() {
    let p = QpProblem::inequality(Matrix::filled(1, 1, 2.0), vec![-6.0], Matrix::zeros(0, 1), vec![]).unwrap();
    assert!((qp_solve(&p, QP_TOL, QP_MAX_ITER).unwrap().z[0] - 3.0).abs() < 1e-9);
    // z ≥ 1 written as −z ≤ −1
    let p = QpProblem::inequality(Matrix::filled(1, 1, 2.0), vec![0.0], Matrix::filled(1, 1, -1.0), vec![-1.0]).unwrap();
    let s = qp_solve(&p, QP_TOL, QP_MAX_ITER).unwrap();
    assert!((s.z[0] - 1.0).abs() < 1e-9);
    assert!(s.y[0] > 0.0);
}

#[test]
fn iteration_cap_reports_max_iter() {
    let (q, _) = random_qp(&mut rng(5), 10, 25);
    let settings = QpSettings { polish: false, ..Default::default() };
    let s = qp_solve_with(&to_problem(&q), 1e-14, 3, &settings).unwrap();
    assert_eq!(s.status, QpStatus::MaxIter);
    assert!(s.z.iter().all(|v| v.is_finite()));
}

#[test]
fn inconsistent_equalities_are_rejected() {
    let p = QpProblem {
        h: Matrix::identity(2),
        f: vec![0.0, 0.0],
        a: Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]),
        lower: vec![1.0, 2.0],
        upper: vec![1.0, 2.0],
    };
    assert!(matches!(qp_solve(&p, QP_TOL, QP_MAX_ITER), Err(Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn riccati_solutions_are_fixed_points(seed in any::<u64>(), n in 1usize..=5, m in 1usize..=2) {
        let mut r = rng(seed);
        let mut a = randn(&mut r, n, n, 1.0);
        let rho = spectral_radius(&a).unwrap();
        a = a.scale(1.1 / rho.max(1e-3));
        let b = randn(&mut r, n, m, 1.0);
        let q = Matrix::identity(n);
        let rr = Matrix::identity(m);
        // a random B is controllable with probability one
        let p = dare_solve(&a, &b, &q, &rr).unwrap();
        prop_assert!(riccati_residual(&p, &a, &b, &q, &rr).unwrap() < 1e-10 * p.norm_inf().max(1.0));
        prop_assert!((&p - &p.transpose()).norm_inf() < 1e-10 * p.norm_inf().max(1.0));
        let g = lqr(&a, &b, &q, &rr).unwrap();
        let cl = &a - &b.try_matmul(&g.k).unwrap();
        prop_assert!(spectral_radius(&cl).unwrap() < 1.0);
    }
}

#[test]
fn lqi_closed_loop_is_stable_and_tracks_several_references() {
    let plant = build_default_plant();
    let mut c = LqiController::new(&plant, &ServoWeights::default()).unwrap();
    let g = &c.gain;
    let cl = &g.a_aug - &g.b_aug.try_matmul(&Matrix::try_concat_cols(&[&g.kx, &g.ki]).unwrap()).unwrap();
    assert!(spectral_radius(&cl).unwrap() < 1.0);
    let d = [2.0, 0.0, 120.0];
    for r in [19.5, 21.0, 23.0] {
        c.reset();
        let mut x = vec![20.0; 4];
        for _ in 0..5000 {
            let u = c.control(&x, r);
            x = plant.step(&x, &u, &d);
        }
        assert!((x[plant.observed] - r).abs() < 1e-6, "r {r}: {}", x[plant.observed]);
    }
}
