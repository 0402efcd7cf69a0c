use dlmpc::baselines::{nominal_mpc_step, LqrController, MpcBuilder, MpcWindow, ServoWeights};
use dlmpc::dpc::LossWeights;
use dlmpc::plant::{build_default_plant, PlantModel, UncertaintySpec};
use dlmpc::rng::substream;
use dlmpc::sim::{metrics, simulate, MpcBaseline, Scenario};
use dlmpc::Matrix;

const D: [f64; 3] = [4.0, 80.0, 150.0];

fn constant_scenario(plant: &PlantModel, steps: usize, r: f64, x0: Vec<f64>, x_lo: f64, x_hi: f64) -> Scenario {
    let total = steps + 16;
    Scenario {
        start: 0,
        steps,
        x0,
        d: Matrix::from_fn(total + 1, 3, |_, j| D[j]),
        r: vec![r; total + 1],
        x_lo: vec![x_lo; total + 1],
        x_hi: vec![x_hi; total + 1],
        u_lo: 0.0,
        u_hi: 5000.0,
        observed: plant.observed,
    }
}

#[test]
fn one_step_unconstrained_move_matches_closed_form() {
    let plant = build_default_plant();
    let w = LossWeights::default();
    let mpc = MpcBuilder::new(&plant, 1, w, 5000.0).unwrap();
    let o = plant.observed;
    for (x, r) in [([18.0, 19.0, 20.0, 20.5], 22.0), ([21.0; 4], 20.0), ([10.0, 12.0, 11.0, 15.0], 24.0)] {
        let d = Matrix::row(&D);
        let win = MpcWindow { d: &d, r: &[r], x_lo: &[-1e6], x_hi: &[1e6], u_lo: -1e6, u_hi: 1e6 };
        let (u, _) = nominal_mpc_step(&mpc, &x, &win).unwrap();
        // minimize Q_r (r − free − g u)² + Q_u u²
        let free = plant.a.matvec(&x)[o] + plant.e.matvec(&D)[o];
        let g = plant.b[(o, 0)];
        let want = w.q_r * g * (r - free) / (w.q_r * g * g + w.q_u);
        assert!((u[0] - want).abs() <= 1e-8 * want.abs().max(1.0), "{} vs {want}", u[0]);
    }
}

#[test]
fn mpc_holds_a_reachable_reference() {
    let plant = build_default_plant();
    let servo = LqrController::new(&plant, &ServoWeights::default()).unwrap();
    let r = 21.0;
    let (xs, us) = servo.targets(&D, r).unwrap();
    assert!(us[0] > 0.0 && us[0] < 5000.0, "reference must be reachable inside the input bounds");
    let sc = constant_scenario(&plant, 500, r, xs, 19.0, 25.0);
    // the energy penalty can only shrink the first move below the servo feed
    let mut mpc = MpcBaseline::new(&plant, 4, LossWeights::default(), 5000.0).unwrap();
    let u0 = mpc.solve(0, &sc.x0, &sc).unwrap()[0];
    assert!(u0.abs() <= us[0].abs() + 1e-9, "u0 {u0} vs steady-state feed {}", us[0]);
    // without it the reference is held exactly
    let w = LossWeights { q_u: 0.0, ..Default::default() };
    let mut mpc = MpcBaseline::new(&plant, 4, w, 5000.0).unwrap();
    let tr = simulate(&plant, &mut mpc, &sc, &UncertaintySpec::NONE, &mut substream(0, "t")).unwrap();
    let m = metrics(&tr, &sc);
    assert!(m.mse_ref < 1e-4, "tracking MSE {}", m.mse_ref);
    assert_eq!(m.ma_con, 0.0);
}

/// With quadratic slacks the steady state balances tracking against the
/// violation: `Q_r (r − x)² + λ (x − x̄)²` is minimized at
/// `x = (Q_r r + λ x̄) / (Q_r + λ)` once the energy term is dropped. Large λ
/// pushes the state onto the bound.
#[test]
fn excluded_reference_settles_at_the_weighted_compromise() {
    let plant = build_default_plant();
    let servo = LqrController::new(&plant, &ServoWeights::default()).unwrap();
    let (r, hi) = (26.0, 25.0);
    let (x0, _) = servo.targets(&D, 24.0).unwrap();
    for q_sx in [50.0, 1e6] {
        let w = LossWeights { q_sx, q_u: 0.0, ..Default::default() };
        let sc = constant_scenario(&plant, 3000, r, x0.clone(), 19.0, hi);
        let mut mpc = MpcBaseline::new(&plant, 1, w, 5000.0).unwrap();
        let tr = simulate(&plant, &mut mpc, &sc, &UncertaintySpec::NONE, &mut substream(0, "t")).unwrap();
        let x_end = tr.x[(sc.steps, plant.observed)];
        let want = (w.q_r * r + q_sx * hi) / (w.q_r + q_sx);
        assert!((x_end - want).abs() < 0.02, "λ {q_sx}: {x_end} vs {want}");
        assert!(r - x_end > 0.5, "tracking error must remain");
        if q_sx > 1e5 {
            assert!(x_end - hi < 1e-3, "state slack {}", x_end - hi);
        }
    }
}

#[test]
fn mpc_is_deterministic() {
    let plant = build_default_plant();
    let servo = LqrController::new(&plant, &ServoWeights::default()).unwrap();
    let (x0, _) = servo.targets(&D, 20.0).unwrap();
    let mut sc = constant_scenario(&plant, 200, 20.0, x0, 19.0, 25.0);
    sc.r = (0..sc.r.len()).map(|k| 20.0 + 2.0 * (k as f64 / 30.0).sin()).collect();
    let run = || {
        let mut mpc = MpcBaseline::new(&plant, 6, LossWeights::default(), 5000.0).unwrap();
        simulate(&plant, &mut mpc, &sc, &UncertaintySpec::NONE, &mut substream(0, "t")).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.u.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.u.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
