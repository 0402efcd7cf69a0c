use dlmpc::autodiff::Tape;
use dlmpc::data::{generate_sysid_dataset, DataConfig, Dataset};
use dlmpc::dpc::{initial_policy, policy_loss, train_policy, LossWeights, Policy, PolicyTrainConfig, SamplingConfig, StepContext};
use dlmpc::joint::{
    id_policy_step, joint_loss, online_adapt, train_joint, AdaptConfig, IdSample, JointTrainConfig, JointWeights,
    OnlineAdaptState,
};
use dlmpc::models::{Model, ModelKind};
use dlmpc::optim::OptimizerConfig;
use dlmpc::plant::build_default_plant;
use dlmpc::Matrix;

fn dataset() -> Dataset {
    generate_sysid_dataset(&build_default_plant(), &DataConfig::default(), 4).unwrap()
}

fn policy(ds: &Dataset, seed: u64) -> Policy {
    let cfg = PolicyTrainConfig { seed, ..Default::default() };
    initial_policy(build_default_plant().dims(), ds.observed, &ds.d, &cfg).unwrap()
}

fn context(r: f64) -> StepContext {
    let inf = f64::INFINITY;
    StepContext::single(
        &[6.0, 150.0, 250.0],
        &[r],
        &[-inf, -inf, -inf, 19.0],
        &[inf, inf, inf, 25.0],
        &[0.0],
        &[5000.0],
    )
}

/// Joint loss with a state correction `x̂` in front of the control branch.
/// Returns the loss value and the gradients of the policy and of `x̂`.
fn joint_grads(model: &Model, p: &Policy, w: &JointWeights, x: &[f64], x_hat: &[f64], id: &IdSample) -> (f64, Vec<Matrix>) {
    let ctx = context(21.0);
    let mut t = Tape::new();
    let mv = model.register(&mut t).unwrap();
    let pv = p.register(&mut t).unwrap();
    let xh = t.leaf(Matrix::row(x_hat));
    let xm = t.constant(Matrix::row(x));
    let xc = t.add(xm, xh).unwrap();
    let xi = t.constant(Matrix::row(&id.x));
    let ui = t.constant(Matrix::row(&id.u));
    let out = id_policy_step(&mut t, &pv, p, &mv, xc, &ctx, xi, ui).unwrap();
    let l = joint_loss(&mut t, &[out], &[Matrix::row(&id.x_next)], &[ctx.r.clone()], w, p.tracking).unwrap();
    let g = t.backward(l).unwrap();
    let mut gs: Vec<Matrix> = pv.all().iter().map(|&v| g.get(v)).collect();
    gs.push(g.get(xh));
    (t.scalar(l), gs)
}

fn sample() -> IdSample {
    IdSample {
        x: vec![19.0, 20.0, 21.0, 22.5],
        u: vec![1200.0],
        d: vec![6.0, 150.0, 250.0],
        x_next: vec![19.1, 20.1, 21.2, 23.0],
    }
}

#[test]
fn id_terms_have_zero_gradient_on_policy_and_state_correction() {
    let ds = dataset();
    let p = policy(&ds, 1);
    let model = Model::init(ModelKind::Ssm, p.dims, 0.05, &mut dlmpc::rng::substream(1, "m")).unwrap();
    let only_id = JointWeights {
        control: LossWeights { q_r: 0.0, q_u: 0.0, q_sx: 0.0, q_su: 0.0 },
        ..Default::default()
    };
    let (l, g) = joint_grads(&model, &p, &only_id, &[30.0; 4], &[0.3, -0.2, 0.1, 0.5], &sample());
    assert!(l > 0.0);
    for gi in &g {
        assert_eq!(gi.max_abs(), 0.0);
    }
    // and with every term on, the policy gradient is the control-loss gradient
    let full = JointWeights::default();
    let (_, gj) = joint_grads(&model, &p, &full, &[30.0; 4], &[0.3, -0.2, 0.1, 0.5], &sample());
    let ctx = context(21.0);
    let mut t = Tape::new();
    let mv = model.register(&mut t).unwrap();
    let pv = p.register(&mut t).unwrap();
    let xh = t.leaf(Matrix::row(&[0.3, -0.2, 0.1, 0.5]));
    let xm = t.constant(Matrix::row(&[30.0; 4]));
    let xc = t.add(xm, xh).unwrap();
    let o = dlmpc::dpc::mpc_policy_step(&mut t, &pv, &p, &mv, xc, &ctx).unwrap();
    let l = policy_loss(&mut t, &[o], &[ctx.r.clone()], &full.control, p.tracking).unwrap();
    let g = t.backward(l).unwrap();
    let mut gc: Vec<Matrix> = pv.all().iter().map(|&v| g.get(v)).collect();
    gc.push(g.get(xh));
    for (a, b) in gj.iter().zip(&gc) {
        assert!((a - b).max_abs() <= 1e-12 * b.max_abs().max(1.0));
    }
}

#[test]
fn zero_dynamics_example() {
    let z = Model::linear(Matrix::zeros(4, 4), Matrix::zeros(4, 1), Matrix::zeros(4, 3)).unwrap();
    let ds = dataset();
    let p = policy(&ds, 2);
    let mut t = Tape::new();
    let mv = z.register(&mut t).unwrap();
    let pv = p.register(&mut t).unwrap();
    let ctx = StepContext { d: Matrix::zeros(1, 3), ..context(21.0) };
    let x = t.constant(Matrix::filled(1, 4, 20.0));
    let xi = t.constant(Matrix::zeros(1, 4));
    let ui = t.constant(Matrix::zeros(1, 1));
    let o = id_policy_step(&mut t, &pv, &p, &mv, x, &ctx, xi, ui).unwrap();
    assert_eq!(t.value(o.x_next_id), &Matrix::zeros(1, 4));
    assert_eq!(t.value(o.dx_id), &Matrix::zeros(1, 4));
}

#[test]
fn exact_plant_identification_term_vanishes() {
    let plant = build_default_plant();
    let model = plant.to_model();
    let ds = dataset();
    let p = policy(&ds, 3);
    let x = [19.0, 20.0, 21.0, 22.5];
    let u = [1200.0];
    let d = [6.0, 150.0, 250.0];
    let id = IdSample { x: x.to_vec(), u: u.to_vec(), d: d.to_vec(), x_next: plant.step(&x, &u, &d) };
    let w = JointWeights {
        control: LossWeights { q_r: 0.0, q_u: 0.0, q_sx: 0.0, q_su: 0.0 },
        q_dx: 0.0,
        ..Default::default()
    };
    let ctx = StepContext { d: Matrix::row(&d), ..context(21.0) };
    let mut t = Tape::new();
    let mv = model.register(&mut t).unwrap();
    let pv = p.register(&mut t).unwrap();
    let xc = t.constant(Matrix::row(&x));
    let xi = t.constant(Matrix::row(&id.x));
    let ui = t.constant(Matrix::row(&id.u));
    let out = id_policy_step(&mut t, &pv, &p, &mv, xc, &ctx, xi, ui).unwrap();
    let l = joint_loss(&mut t, &[out], &[Matrix::row(&id.x_next)], &[ctx.r.clone()], &w, p.tracking).unwrap();
    assert!(t.scalar(l) < 1e-20);
    let g = t.backward(l).unwrap();
    for v in &mv.params {
        assert!(g.get(*v).max_abs() < 1e-9);
    }
}

#[test]
fn adaptation_is_stationary_at_zero_loss() {
    let plant = build_default_plant();
    let model = plant.to_model();
    let ds = dataset();
    let mut p = policy(&ds, 4);
    p.w2 = Matrix::zeros(p.w2.rows(), p.w2.cols());
    p.b2 = Matrix::zeros(1, 1);
    let x = [20.0, 21.0, 21.5, 22.0];
    let d = [6.0, 150.0, 250.0];
    // u = 0, so the reference is whatever the plant reaches unforced
    let r = plant.step(&x, &[0.0], &d)[plant.observed];
    let ctx = StepContext { d: Matrix::row(&d), ..context(r) };
    let id = IdSample { x: x.to_vec(), u: vec![0.0], d: d.to_vec(), x_next: plant.step(&x, &[0.0], &d) };
    let mut state = OnlineAdaptState::new(4, AdaptConfig::default()).unwrap();
    let before = p.clone();
    online_adapt(&mut state, &mut p, &model, &x, &ctx, Some(&id)).unwrap();
    assert!((&p.w2 - &before.w2).max_abs() < 1e-12);
    assert!((&p.b2 - &before.b2).max_abs() < 1e-12);
    assert!(state.x_hat.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn adaptation_changes_only_the_output_layer_and_correction() {
    let ds = dataset();
    let model = build_default_plant().to_model();
    let mut p = policy(&ds, 5);
    let before = p.clone();
    let model_before = model.clone();
    let mut state = OnlineAdaptState::new(4, AdaptConfig::default()).unwrap();
    let ctx = context(23.0);
    for k in 0..3 {
        let x = [18.0 + k as f64, 19.0, 20.0, 21.0];
        online_adapt(&mut state, &mut p, &model, &x, &ctx, Some(&sample())).unwrap();
    }
    assert_eq!(p.w1, before.w1);
    assert_eq!(p.b1, before.b1);
    assert_eq!(p.norm, before.norm);
    assert_eq!(model, model_before);
    assert!(p.w2 != before.w2 || p.b2 != before.b2);
    assert!(state.x_hat.iter().any(|v| *v != 0.0));
}

fn small_joint(epochs: usize) -> JointTrainConfig {
    JointTrainConfig {
        epochs,
        eval_every: 5,
        sampling: SamplingConfig { batch: 32, ..Default::default() },
        optimizer: OptimizerConfig::adam(1e-3),
        ..Default::default()
    }
}

#[test]
fn detached_joint_training_is_policy_training() {
    let ds = dataset();
    let cfg = JointTrainConfig {
        detach_id: true,
        weights: JointWeights { q_id: 0.0, q_dx: 0.0, ..Default::default() },
        ..small_joint(25)
    };
    let (model, pj, rj) = train_joint(&ds, &cfg).unwrap();
    let split = ds.split().unwrap();
    let d = ds.d.slice_rows(split.train.start, split.train.len());
    let (pp, rp) = train_policy(&model, ds.observed, &d, split.train.start, &cfg.policy_config()).unwrap();
    assert_eq!(pj, pp);
    assert_eq!(rj, rp);
}

#[test]
fn joint_training_is_deterministic_and_keeps_the_spectrum_bound() {
    let ds = dataset();
    let cfg = small_joint(15);
    let (m1, p1, r1) = train_joint(&ds, &cfg).unwrap();
    let (m2, p2, r2) = train_joint(&ds, &cfg).unwrap();
    assert_eq!((m1.clone(), p1, r1), (m2, p2, r2));
    let rho = dlmpc::linalg::spectral_radius(&m1.transition_matrix().unwrap()).unwrap();
    assert!(rho <= 1.0 + 1e-9 && rho >= 1.0 - cfg.eps - 1e-9);
}
